"""Global thumbs-up/thumbs-down ledger of the provider's social reputation."""
from __future__ import annotations

from dataclasses import dataclass

UP = "up"
DOWN = "down"


@dataclass
class ReputationLedger:
    s_plus: int = 0
    s_minus: int = 0

    @property
    def total(self) -> int:
        return self.s_plus + self.s_minus

    def record_post(self, direction: str) -> "ReputationLedger":
        if direction == UP:
            self.s_plus += 1
        elif direction == DOWN:
            self.s_minus += 1
        else:
            raise ValueError(f"post direction must be {UP!r} or {DOWN!r}, got {direction!r}")
        return self

    def reputation(self) -> float | None:
        """Share of positive posts, or None while nothing has been posted."""
        if self.total == 0:
            return None
        return self.s_plus / self.total

    def volume_weight(self, nu: float) -> float:
        return volume_weight(self.total, nu)


def volume_weight(total_posts: int, nu: float) -> float:
    """How strongly social information counts, ``min(total / nu, 1)``."""
    if nu < 1:
        raise ValueError("nu must be >= 1")
    return min(total_posts / nu, 1.0)
