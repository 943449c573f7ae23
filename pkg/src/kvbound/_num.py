import math


def clean_ceil(x: float) -> int:
    """``ceil`` that ignores last-ulp noise on values that are integers in exact arithmetic."""
    return math.ceil(round(x, 9))
