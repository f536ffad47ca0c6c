from dataclasses import dataclass, field


@dataclass
class MqnTrajectory:
    """
    One Criss-Cross episode.
    states has N+1 entries, actions/costs/log_probs have N. regen_indices lists every position holding (0,0,0).
    scenarios is filled only when next states were pre-sampled for the sampled estimator.
    """
    states: list
    actions: list
    costs: list
    regen_indices: list
    log_probs: list = field(default_factory=list)
    scenarios: dict | None = None

    @property
    def length(self):
        return len(self.actions)


@dataclass
class EpisodicTrajectory:
    """
    A finite-horizon episode: one record per decision position.
    index holds the position labels, (t, i) for ride-hailing or (t,) for small test MDPs.
    """
    states: list
    actions: list
    rewards: list
    index: list
    log_probs: list = field(default_factory=list)
    scenarios: dict | None = None
    final_state: object = None

    @property
    def length(self):
        return len(self.actions)


@dataclass
class RideTrajectory(EpisodicTrajectory):
    n_requests: int = 0

    @property
    def matching_rate(self):
        # no requests at all counts as rate 0
        if self.n_requests == 0:
            return 0.0
        return float(sum(self.rewards)) / self.n_requests
