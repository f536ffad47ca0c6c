"""
A small ride-hailing dispatch model with epochs split into sequential decision (SDM) steps.

Inside an epoch the cars that are free at its start are visited one at a time and each gets
exactly one action: take a request waiting in the car's region, or hold. Those steps are
deterministic. Passenger arrivals only happen between epochs.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from amplab.errors import ContractViolation, InvalidActionError
from amplab.simulation.rng import sample_index
from amplab.simulation.trajectory import RideTrajectory

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RideHailConfig:
    R: int = 5
    n_cars: int = 20
    H: int = 60
    arrival_rates: tuple = ()
    travel_time: tuple = ()
    patience: int = 1
    _rates: np.ndarray = field(init=False, repr=False, compare=False)
    _tau: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.R < 1:
            raise ContractViolation(f"R must be >= 1, got {self.R}")
        if self.H < 1:
            raise ContractViolation(f"H must be >= 1, got {self.H}")
        if self.n_cars < 0:
            raise ContractViolation(f"n_cars must be >= 0, got {self.n_cars}")
        if self.patience < 1:
            raise ContractViolation(f"patience must be >= 1, got {self.patience}")
        rates = np.asarray(self.arrival_rates, dtype=float)
        tau = np.asarray(self.travel_time)
        if rates.shape != (self.R, self.R):
            raise ContractViolation(f"arrival_rates must be {self.R}x{self.R}, got shape {rates.shape}")
        if tau.shape != (self.R, self.R):
            raise ContractViolation(f"travel_time must be {self.R}x{self.R}, got shape {tau.shape}")
        if not np.all(np.isfinite(rates)) or np.any(rates < 0):
            raise ContractViolation("arrival rates must be finite and >= 0")
        if np.any(tau < 1) or np.any(tau != np.round(tau)):
            raise ContractViolation("travel times must be integers >= 1")
        # store plain tuples so configs compare, hash and pickle cleanly
        object.__setattr__(self, "arrival_rates", tuple(tuple(float(x) for x in row) for row in rates))
        object.__setattr__(self, "travel_time", tuple(tuple(int(x) for x in row) for row in tau))
        object.__setattr__(self, "_rates", rates)
        object.__setattr__(self, "_tau", tau.astype(int))

    @property
    def rates(self):
        return self._rates

    @property
    def tau(self):
        return self._tau

    @property
    def n_action_templates(self):
        return self.R * self.R + 1


def desk_scale_config(R=5, n_cars=20, H=60, patience=1, rate=0.15, arrival_rates=None, travel_time=None):
    """Uniform OD rates and travel time 1 + |o - d| epochs on a line of regions, unless given."""
    if arrival_rates is None:
        arrival_rates = [[rate] * R for _ in range(R)]
    if travel_time is None:
        travel_time = [[1 + abs(o - d) for d in range(R)] for o in range(R)]
    return RideHailConfig(R=R, n_cars=n_cars, H=H, arrival_rates=arrival_rates,
                          travel_time=travel_time, patience=patience)


@dataclass(frozen=True)
class RideHailState:
    """
    t is the epoch (1..H). available lists the cars free at the start of the epoch, in car order;
    cursor points into it. When cursor == len(available) the epoch is over and waits for epoch_advance.
    open_requests holds sorted (origin, destination, expiry_epoch) triples.
    """
    t: int
    cursor: int
    available: tuple
    car_region: tuple
    busy_until: tuple
    open_requests: tuple

    @property
    def sdm_step(self):
        return self.cursor + 1

    @property
    def n_available(self):
        return len(self.available)

    @property
    def epoch_end_pending(self):
        return self.cursor >= len(self.available)

    @property
    def cursor_car(self):
        return self.available[self.cursor]

    def request_count(self, origin, destination):
        return sum(1 for o, d, _ in self.open_requests if o == origin and d == destination)


@dataclass(frozen=True)
class SdmAction:
    origin: int | None = None
    destination: int | None = None

    @classmethod
    def match(cls, origin, destination):
        return cls(origin, destination)

    @classmethod
    def hold(cls):
        return cls()

    @property
    def is_hold(self):
        return self.origin is None

    def template_index(self, R):
        return R * R if self.is_hold else self.origin * R + self.destination

    @classmethod
    def from_template(cls, index, R):
        if index == R * R:
            return cls.hold()
        return cls.match(index // R, index % R)


def _available_cars(busy_until, t):
    return tuple(car for car, until in enumerate(busy_until) if until <= t)


def _draw_requests(cfg, born_epoch, rng):
    counts = rng.poisson(cfg.rates)
    expiry = born_epoch + cfg.patience
    new = []
    for o in range(cfg.R):
        for d in range(cfg.R):
            new.extend([(o, d, expiry)] * int(counts[o, d]))
    return new


def initial_state(cfg, rng):
    """Epoch 1 with every car free, spread over the regions in car order, and a first batch of requests."""
    car_region = tuple(car % cfg.R for car in range(cfg.n_cars))
    busy_until = (0,) * cfg.n_cars
    requests = _draw_requests(cfg, 1, rng)
    state = RideHailState(
        t=1,
        cursor=0,
        available=_available_cars(busy_until, 1),
        car_region=car_region,
        busy_until=busy_until,
        open_requests=tuple(sorted(requests)),
    )
    return state, len(requests)


def is_terminal(state, cfg):
    return state.epoch_end_pending and state.t >= cfg.H


def is_feasible(state, action, cfg):
    if state.epoch_end_pending:
        return False
    if action.is_hold:
        return True
    if not (0 <= action.origin < cfg.R and 0 <= action.destination < cfg.R):
        return False
    if state.car_region[state.cursor_car] != action.origin:
        return False
    return state.request_count(action.origin, action.destination) > 0


def feasible_mask(state, cfg):
    """Boolean vector over the R*R+1 action templates (match(o, d) at o*R+d, hold last)."""
    mask = np.zeros(cfg.n_action_templates, dtype=bool)
    if state.epoch_end_pending:
        return mask
    mask[-1] = True
    region = state.car_region[state.cursor_car]
    for o, d, _ in state.open_requests:
        if o == region:
            mask[o * cfg.R + d] = True
    return mask


def sdm_step(state, action, cfg, location=None):
    """
    Task: Apply one SDM decision to the car under the cursor.
    Inputs:
    - state = RideHailState in the middle of an epoch,
    - action = SdmAction (match a waiting request from the car's region, or hold),
    - cfg = RideHailConfig.
    Returns (next state, reward). A match pays 1, a hold pays 0. The move is deterministic.
    """
    if state.epoch_end_pending:
        raise ContractViolation(f"epoch {state.t} has no car left to assign; call epoch_advance")
    location = location or (state.t, state.sdm_step)
    car = state.cursor_car

    if action.is_hold:
        return RideHailState(state.t, state.cursor + 1, state.available, state.car_region,
                             state.busy_until, state.open_requests), 0.0

    o, d = action.origin, action.destination
    if not (0 <= o < cfg.R and 0 <= d < cfg.R):
        raise InvalidActionError(f"match({o}, {d}) names a region outside 0..{cfg.R - 1}", location)
    if state.car_region[car] != o:
        raise InvalidActionError(
            f"car {car} is in region {state.car_region[car]} and cannot pick up in region {o}", location)
    requests = list(state.open_requests)
    for k, (ro, rd, _) in enumerate(requests):
        if ro == o and rd == d:
            # sorted order means the request closest to expiry is served first
            del requests[k]
            break
    else:
        raise InvalidActionError(f"no open request from region {o} to region {d}", location)

    car_region = list(state.car_region)
    busy_until = list(state.busy_until)
    car_region[car] = d
    busy_until[car] = state.t + int(cfg.tau[o, d])
    next_state = RideHailState(state.t, state.cursor + 1, state.available, tuple(car_region),
                               tuple(busy_until), tuple(requests))
    return next_state, 1.0


def _advance(state, cfg, rng):
    if not state.epoch_end_pending:
        raise ContractViolation(f"epoch_advance called mid-epoch at (t={state.t}, i={state.sdm_step})")
    if state.t >= cfg.H:
        raise ContractViolation(f"epoch_advance called at the last epoch H={cfg.H}")
    t = state.t
    survivors = [r for r in state.open_requests if r[2] > t]
    new = _draw_requests(cfg, t + 1, rng)
    next_state = RideHailState(
        t=t + 1,
        cursor=0,
        available=_available_cars(state.busy_until, t + 1),
        car_region=state.car_region,
        busy_until=state.busy_until,
        open_requests=tuple(sorted(survivors + new)),
    )
    return next_state, len(new)


def epoch_advance(state, cfg, rng):
    """Drop expired requests, draw the Poisson arrivals of the next epoch and reset the cursor."""
    return _advance(state, cfg, rng)[0]


def advance_to_decision(state, cfg, rng):
    """
    Advance from an epoch-end state until a car is free to act or the episode is over.
    Epochs without free cars contribute no SDM steps. Returns (state, new requests drawn).
    """
    drawn = 0
    while state.epoch_end_pending and state.t < cfg.H:
        state, n_new = _advance(state, cfg, rng)
        drawn += n_new
    return state, drawn


def sample_arrival_scenarios(state, L, cfg, rng):
    """
    Task: Draw L independent next-decision states from an epoch-end state (the state right after
    the last SDM action of epoch t < H). Like the realized transition, a draw passes over epochs
    in which no car is free. The list follows draw order.
    """
    if L < 1:
        raise ContractViolation(f"sample size L must be >= 1, got {L}")
    if not state.epoch_end_pending or state.t >= cfg.H:
        raise ContractViolation("arrival scenarios need the epoch-end state of an epoch before H")
    return [advance_to_decision(state, cfg, rng)[0] for _ in range(L)]


def simulate_ride_episode(policy, cfg, rng):
    """
    Task: Roll out one full episode.
    Inputs:
    - policy = callable mapping a RideHailState to probabilities over the R*R+1 action templates,
    - cfg = RideHailConfig,
    - rng = numpy Generator.
    """
    state, n_requests = initial_state(cfg, rng)
    state, drawn = advance_to_decision(state, cfg, rng)
    n_requests += drawn

    states, actions, rewards, index, log_probs = [], [], [], [], []
    while not is_terminal(state, cfg):
        location = (state.t, state.sdm_step)
        probs = np.asarray(policy(state), dtype=float)
        template = sample_index(probs, rng)
        action = SdmAction.from_template(template, cfg.R)
        if not is_feasible(state, action, cfg):
            raise InvalidActionError(f"policy chose infeasible action {action}", location)
        states.append(state)
        actions.append(template)
        index.append(location)
        log_probs.append(float(np.log(probs[template])))
        state, reward = sdm_step(state, action, cfg, location)
        rewards.append(reward)
        if state.epoch_end_pending:
            state, drawn = advance_to_decision(state, cfg, rng)
            n_requests += drawn

    trajectory = RideTrajectory(states=states, actions=actions, rewards=rewards, index=index,
                                log_probs=log_probs, n_requests=n_requests, final_state=state)
    logger.debug("ride episode: %d SDM steps, %d requests, matching rate %.4f",
                 len(actions), n_requests, trajectory.matching_rate)
    return trajectory


def sdm_case(state, cfg):
    """'a' for a mid-epoch step, 'b' for the last step of the last epoch, 'c' for the last step of an earlier epoch."""
    if state.cursor < state.n_available - 1:
        return "a"
    if state.t >= cfg.H:
        return "b"
    return "c"


class RideHailEnvironment:
    name = "ridehail"
    objective_sign = 1.0

    def __init__(self, cfg):
        self.cfg = cfg
        self.n_actions = cfg.n_action_templates
        self.request_scale = max(1.0, float(cfg.rates.sum()) / cfg.R)

    @property
    def feature_dim(self):
        R = self.cfg.R
        return 2 + 3 * R + R * R

    def encode(self, states):
        cfg = self.cfg
        R = cfg.R
        scale_cars = max(1, cfg.n_cars)
        rows = np.zeros((len(states), self.feature_dim))
        for row, s in zip(rows, states):
            row[0] = s.t / cfg.H
            row[1] = s.cursor / max(1, s.n_available)
            if not s.epoch_end_pending:
                row[2 + s.car_region[s.cursor_car]] = 1.0
            for car in s.available[s.cursor + 1:]:
                row[2 + R + s.car_region[car]] += 1.0 / scale_cars
            for car, until in enumerate(s.busy_until):
                if until > s.t:
                    row[2 + 2 * R + s.car_region[car]] += 1.0 / scale_cars
            for o, d, _ in s.open_requests:
                row[2 + 3 * R + o * R + d] += 1.0 / self.request_scale
        return rows

    def action_mask(self, state):
        return feasible_mask(state, self.cfg)

    def simulate(self, policy, rng):
        return simulate_ride_episode(policy, self.cfg, rng)

    def anchor_key(self, trajectory, position):
        return trajectory.index[position]
