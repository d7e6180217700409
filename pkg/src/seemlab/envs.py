"""Toy MDPs and offline dataset construction.

Two environments reproduce the divergence phenomena at desk scale:

* ``ToyNav``: free navigation on the plane. States live in [-1, 1]^2, the
  8 actions are the compass directions (every nonzero combination of
  forward/backward per axis), each moving the state by 0.01 along its
  active axes. All rewards are zero, so the true Q-value is identically
  zero and any Q inflation is pure estimation pathology. Q-network inputs
  are (state, action direction): the action is encoded as its unit compass
  vector, giving a bounded action set whose "extreme points" are the
  diagonals.
* ``BairdInstance``: the classic 7-state star MDP with the overparameterized
  8-dim features (rank 7), dashed/solid actions, behavior policy 6/7 dashed,
  target policy always solid, all rewards zero, gamma 0.99. Q inputs are
  per-action blocks of the state features, optionally passed through the
  same psi normalizer the networks use ("psi in front of the linear map").

Datasets are immutable lists of transitions plus the environment that
generated them, reproducible from (env, seed, m), and serializable as JSON
lines with a version header.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .net import psi

DATASET_FORMAT = "seemlab-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: int
    s_next: np.ndarray
    r: float


@dataclass
class Dataset:
    """Ordered offline transitions plus the generating environment."""

    env: object
    transitions: list[Transition]
    seed: int

    def __post_init__(self):
        if len(self.transitions) < 1:
            raise ValueError("a dataset needs at least one transition")
        self.states = np.array([t.s for t in self.transitions], dtype=np.float64)
        self.actions = np.array([t.a for t in self.transitions], dtype=np.int64)
        self.next_states = np.array(
            [t.s_next for t in self.transitions], dtype=np.float64
        )
        self.rewards = np.array([t.r for t in self.transitions], dtype=np.float64)

    @property
    def m(self) -> int:
        return len(self.transitions)

    def inputs(self) -> np.ndarray:
        """X: encoded (s_i, a_i) rows, shape (M, d0)."""
        return self.env.encode_batch(self.states, self.actions)

    def next_candidates(self) -> np.ndarray:
        """Encodings of (s'_i, a) for every action, shape (M * n_actions, d0).

        Row i * n_actions + a is (s'_i, a); fixed for the whole run, so the
        trainer precomputes it once.
        """
        n_a = self.env.n_actions
        m = self.m
        rep = np.repeat(self.next_states, n_a, axis=0)
        acts = np.tile(np.arange(n_a, dtype=np.int64), m)
        return self.env.encode_batch(rep, acts)


class ToyNav:
    """2-D free navigation with 8 compass actions and zero reward."""

    name = "toy_nav"
    n_actions = 8
    state_dim = 2
    step_size = 0.01
    state_low = -1.0
    state_high = 1.0

    # compass directions, action 0 = +x; dynamics move by step_size * direction
    directions = np.array(
        [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)],
        dtype=np.float64,
    )

    @property
    def input_dim(self) -> int:
        return 4

    def displacement(self, a: int) -> np.ndarray:
        return self.step_size * self.directions[a]

    def dynamics(self, s: np.ndarray, a: int) -> np.ndarray:
        return np.asarray(s, dtype=np.float64) + self.displacement(a)

    def encode_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Q-network input rows: state followed by the action's unit vector."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return np.hstack([states, self.directions[np.asarray(actions, dtype=np.int64)]])

    def action_vectors(self, actions: np.ndarray) -> np.ndarray:
        """Vector form of actions, for policy-direction cosines."""
        return self.directions[np.asarray(actions, dtype=np.int64)]

    def action_norms(self) -> np.ndarray:
        return np.linalg.norm(self.directions, axis=1)

    def descriptor(self) -> dict:
        return {"name": self.name}


def toy_nav_dataset(m: int, seed: int) -> Dataset:
    """Uniform random (s, a) pairs in the box, rewards all zero."""
    if m < 1:
        raise ValueError("dataset size must be >= 1")
    env = ToyNav()
    rng = np.random.default_rng(seed)
    states = rng.uniform(env.state_low, env.state_high, size=(m, 2))
    actions = rng.integers(0, env.n_actions, size=m)
    transitions = [
        Transition(s=states[i], a=int(actions[i]), s_next=env.dynamics(states[i], int(actions[i])), r=0.0)
        for i in range(m)
    ]
    return Dataset(env=env, transitions=transitions, seed=seed)


def subsample(d: Dataset, fraction: float, seed: int) -> Dataset:
    """Uniform sample without replacement of ceil(fraction * M) transitions."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    k = math.ceil(fraction * d.m)
    if k < 1:
        raise ValueError("subsample would be empty")
    rng = np.random.default_rng(seed)
    idx = rng.choice(d.m, size=k, replace=False)
    return Dataset(env=d.env, transitions=[d.transitions[i] for i in idx], seed=seed)


DASHED = 0
SOLID = 1


@dataclass(frozen=True)
class BairdInstance:
    """The 7-state star MDP with overparameterized linear features.

    States are indices 0..6; state features are 8-dim: phi(i) = 2 e_i + e_8
    for the six outer states, phi(6) = e_7 + 2 e_8 for the hub. The feature
    matrix has rank 7 over 8 columns. The solid action jumps to the hub, the
    dashed action scatters uniformly over the outer states; all rewards are
    zero. `use_psi` routes Q-network inputs through the psi normalizer,
    the variant that restores convergence.
    """

    use_psi: bool = False
    gamma: float = field(default=0.99)

    name = "baird"
    n_states = 7
    n_actions = 2
    state_dim = 1
    behavior_dashed_prob = 6.0 / 7.0

    @property
    def input_dim(self) -> int:
        return 16

    def state_features(self, state: int) -> np.ndarray:
        f = np.zeros(8)
        if state < 6:
            f[state] = 2.0
            f[7] = 1.0
        else:
            f[6] = 1.0
            f[7] = 2.0
        return f

    def feature_matrix(self) -> np.ndarray:
        return np.array([self.state_features(s) for s in range(self.n_states)])

    def encode_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Per-action block features: the active action's block holds phi(s)."""
        states = np.asarray(states, dtype=np.float64).reshape(-1)
        actions = np.asarray(actions, dtype=np.int64).reshape(-1)
        out = np.zeros((states.size, 16))
        feats = self.feature_matrix()
        for i, (s, a) in enumerate(zip(states, actions)):
            out[i, 8 * a : 8 * a + 8] = feats[int(s)]
        if self.use_psi:
            out = psi(out)
        return out

    def action_vectors(self, actions: np.ndarray) -> np.ndarray:
        return np.eye(2)[np.asarray(actions, dtype=np.int64)]

    def action_norms(self) -> np.ndarray:
        return np.ones(self.n_actions)

    def classic_init_weights(self) -> np.ndarray:
        """Per-action copies of the classic init with the 8th weight large."""
        w = np.ones(8)
        w[7] = 10.0
        return np.concatenate([w, w])

    def descriptor(self) -> dict:
        return {"name": self.name, "use_psi": self.use_psi}


def baird_step(instance: BairdInstance, state: int, policy: str, rng) -> Transition:
    """One sampled transition under the behavior or target policy."""
    if not 0 <= state < instance.n_states:
        raise ValueError(f"state must be in 0..6, got {state}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    if policy == "target":
        action = SOLID
    elif policy == "behavior":
        action = DASHED if rng.random() < instance.behavior_dashed_prob else SOLID
    else:
        raise ValueError(f"policy must be 'behavior' or 'target', got {policy!r}")
    if action == SOLID:
        nxt = 6
    else:
        nxt = int(rng.integers(0, 6))
    return Transition(
        s=np.array([state], dtype=np.float64),
        a=action,
        s_next=np.array([nxt], dtype=np.float64),
        r=0.0,
    )


def baird_dataset(m: int, seed: int, use_psi: bool = False) -> Dataset:
    """A behavior-policy trajectory of m transitions from a random start."""
    if m < 1:
        raise ValueError("dataset size must be >= 1")
    env = BairdInstance(use_psi=use_psi)
    rng = np.random.default_rng(seed)
    state = int(rng.integers(0, env.n_states))
    transitions = []
    for _ in range(m):
        t = baird_step(env, state, "behavior", rng)
        transitions.append(t)
        state = int(t.s_next[0])
    return Dataset(env=env, transitions=transitions, seed=seed)


def env_from_descriptor(desc: dict):
    if desc.get("name") == ToyNav.name:
        return ToyNav()
    if desc.get("name") == BairdInstance.name:
        return BairdInstance(use_psi=bool(desc.get("use_psi", False)))
    raise ValueError(f"unknown environment descriptor: {desc!r}")


def save_dataset(path, d: Dataset):
    """JSON lines: a version header, then one transition per line."""
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "env": d.env.descriptor(),
        "seed": d.seed,
        "m": d.m,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for t in d.transitions:
            row = {
                "s": [float(v) for v in t.s],
                "a": int(t.a),
                "s_next": [float(v) for v in t.s_next],
                "r": float(t.r),
            }
            fh.write(json.dumps(row) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT:
            raise ValueError(f"not a {DATASET_FORMAT} file: {path}")
        if header.get("version") != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {header.get('version')}")
        env = env_from_descriptor(header["env"])
        transitions = []
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            transitions.append(
                Transition(
                    s=np.asarray(row["s"], dtype=np.float64),
                    a=int(row["a"]),
                    s_next=np.asarray(row["s_next"], dtype=np.float64),
                    r=float(row["r"]),
                )
            )
    return Dataset(env=env, transitions=transitions, seed=int(header["seed"]))
