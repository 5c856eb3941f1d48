"""Per-session generation statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import EmptyStatsError


@dataclass
class GenStats:
    rounds: int = 0
    accepted_lengths: dict[int, int] = field(default_factory=dict)
    tokens_emitted: int = 0
    wall_time_ns: int = 0
    target_forward_calls: int = 0
    draft_forward_calls: int = 0
    peak_extra_bytes: int = 0

    def record_round(self, accepted: int) -> None:
        self.rounds += 1
        self.accepted_lengths[accepted] = self.accepted_lengths.get(accepted, 0) + 1
        self.tokens_emitted += accepted + 1

    @property
    def mean_accepted(self) -> float:
        """Tokens per verification round, correction/bonus token included."""
        if self.rounds == 0:
            raise EmptyStatsError("no verification rounds recorded")
        return self.tokens_emitted / self.rounds

    def merge(self, other: "GenStats") -> "GenStats":
        hist = dict(self.accepted_lengths)
        for k, v in other.accepted_lengths.items():
            hist[k] = hist.get(k, 0) + v
        return GenStats(self.rounds + other.rounds, hist, self.tokens_emitted + other.tokens_emitted,
                        self.wall_time_ns + other.wall_time_ns,
                        self.target_forward_calls + other.target_forward_calls,
                        self.draft_forward_calls + other.draft_forward_calls,
                        max(self.peak_extra_bytes, other.peak_extra_bytes))

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "accepted_lengths": {str(k): v for k, v in sorted(self.accepted_lengths.items())},
            "tokens_emitted": self.tokens_emitted,
            "wall_time_ns": self.wall_time_ns,
            "target_forward_calls": self.target_forward_calls,
            "draft_forward_calls": self.draft_forward_calls,
            "peak_extra_bytes": self.peak_extra_bytes,
        }
