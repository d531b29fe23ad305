# wemp/utils/helpers.py
import uuid
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def generate_run_id() -> str:
    """
    Generate a unique run ID.

    Returns:
        str: A UUID string for the run.
    """
    return str(uuid.uuid4())


def integer_ratio(numerator: float, denominator: float, what: str = "ratio", rel_tol: float = 1e-9) -> int:
    """
    Return numerator / denominator as an integer, or raise if it is not one.

    Args:
        numerator (float): e.g. a final time or a coarse step.
        denominator (float): e.g. a coarse or fine step.
        what (str): Name used in the error message.
        rel_tol (float): Allowed relative deviation from an integer.

    Returns:
        int: The rounded quotient.

    Raises:
        ValueError: If the quotient is not an integer to within rel_tol.
    """
    if denominator <= 0:
        raise ValueError(f"{what}: step must be positive, got {denominator}")
    quotient = numerator / denominator
    count = int(round(quotient))
    if abs(count * denominator - numerator) > rel_tol * max(abs(numerator), denominator):
        raise ValueError(f"{what}: {numerator} is not an integer multiple of {denominator}")
    return count


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: Optional[int] = None) -> List[R]:
    """
    Apply fn to every item, in a thread pool when workers > 1.

    Results come back in input order whatever the completion order, so a
    parallel run reduces exactly like a sequential one.
    """
    items = list(items)
    if not workers or workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
