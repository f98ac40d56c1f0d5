"""Memory tasks: a grid Numpad and a supervised copy task.

Numpad: an ``n x n`` grid where every cell is a pad.  A hidden sequence of
``K`` distinct pads, each king-move adjacent to the previous one, must be
pressed in order.  Moving one cell presses the landing pad; jumping two cells
presses only the landing pad.  The first time a sequence index is reached in
a pass it pays +1; a wrong pad clears all activations; finishing the sequence
clears the pads and starts a new pass over the same sequence.  With
``reward_once=False`` every correct press pays, including presses that
rebuild a prefix after a clear.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError

# king-move directions (dr, dc); actions 0-7 move one cell, 8-15 jump two
DIRECTIONS = ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1))
N_ACTIONS = 2 * len(DIRECTIONS)
EPISODE_LIMIT = 500


def moore_adjacent(a: int, b: int, n: int) -> bool:
    ra, ca = divmod(a, n)
    rb, cb = divmod(b, n)
    return a != b and abs(ra - rb) <= 1 and abs(ca - cb) <= 1


def is_valid_sequence(seq, n: int) -> bool:
    seq = list(seq)
    if not seq or len(set(seq)) != len(seq):
        return False
    if any(not 0 <= p < n * n for p in seq):
        return False
    return all(moore_adjacent(a, b, n) for a, b in zip(seq, seq[1:]))


def numpad_generate_sequence(n: int, length: int, rng: np.random.Generator) -> list[int]:
    """Random self-avoiding king path of ``length`` pads (backtracking DFS, shuffled neighbors)."""
    if not 1 <= length <= n * n:
        raise ContractError(f"sequence length must lie in [1, {n * n}], got {length}")
    neighbors = [[q for q in range(n * n) if moore_adjacent(p, q, n)] for p in range(n * n)]

    path = [int(rng.integers(n * n))]
    used = {path[0]}
    # each frame holds the not-yet-tried successors of path[i]
    frames = [list(rng.permutation(neighbors[path[0]]))]
    while len(path) < length:
        if not frames[-1]:
            used.discard(path.pop())
            frames.pop()
            if not path:
                start = int(rng.integers(n * n))
                path, used, frames = [start], {start}, [list(rng.permutation(neighbors[start]))]
            continue
        nxt = int(frames[-1].pop())
        if nxt in used:
            continue
        path.append(nxt)
        used.add(nxt)
        frames.append(list(rng.permutation(neighbors[nxt])))
    return path


@dataclass
class NumpadState:
    n: int
    sequence: list[int]
    agent: tuple[int, int]
    progress: int = 0
    credited: int = 0  # highest index paid out in the current pass
    passes: int = 0
    step: int = 0
    episode_limit: int = EPISODE_LIMIT
    activated: np.ndarray = field(default=None)
    prev_action: int | None = None
    prev_reward: float = 0.0
    total_reward: float = 0.0

    def __post_init__(self):
        if self.activated is None:
            self.activated = np.zeros(self.n * self.n, dtype=bool)

    @property
    def done(self) -> bool:
        return self.step >= self.episode_limit


def observation_size(n: int) -> int:
    return 2 * n * n + N_ACTIONS + 1


def observe(state: NumpadState) -> np.ndarray:
    """agent one-hot (n^2) | activated mask (n^2) | previous action one-hot | previous reward."""
    n2 = state.n * state.n
    obs = np.zeros(observation_size(state.n))
    obs[state.agent[0] * state.n + state.agent[1]] = 1.0
    obs[n2 : 2 * n2] = state.activated
    if state.prev_action is not None:
        obs[2 * n2 + state.prev_action] = 1.0
    obs[-1] = state.prev_reward
    return obs


def numpad_reset(n: int, length: int, rng: np.random.Generator, episode_limit: int = EPISODE_LIMIT):
    sequence = numpad_generate_sequence(n, length, rng)
    start = divmod(int(rng.integers(n * n)), n)
    state = NumpadState(n=n, sequence=sequence, agent=start, episode_limit=episode_limit)
    return state, observe(state)


def _press(state: NumpadState, pad: int, repress_clears: bool, reward_once: bool) -> float:
    if state.activated[pad]:
        if repress_clears:
            state.activated[:] = False
            state.progress = 0
        return 0.0
    if pad != state.sequence[state.progress]:
        state.activated[:] = False
        state.progress = 0
        return 0.0
    state.activated[pad] = True
    state.progress += 1
    reward = 0.0 if reward_once else 1.0
    if state.progress > state.credited:
        state.credited = state.progress
        reward = 1.0
    if state.progress == len(state.sequence):
        state.passes += 1
        state.activated[:] = False
        state.progress = 0
        state.credited = 0
    return reward


def numpad_step(state: NumpadState, action: int, repress_clears: bool = False, reward_once: bool = True):
    """Advance one step in place.  Returns ``(state, observation, reward, done)``."""
    if state.done:
        raise ContractError("episode is over; reset before stepping")
    if not 0 <= action < N_ACTIONS:
        raise ContractError(f"action must lie in [0, {N_ACTIONS}), got {action}")
    dr, dc = DIRECTIONS[action % len(DIRECTIONS)]
    reach = 1 if action < len(DIRECTIONS) else 2
    r, c = state.agent[0] + reach * dr, state.agent[1] + reach * dc
    reward = 0.0
    if 0 <= r < state.n and 0 <= c < state.n:
        state.agent = (r, c)
        reward = _press(state, r * state.n + c, repress_clears, reward_once)
    state.step += 1
    state.prev_action = int(action)
    state.prev_reward = reward
    state.total_reward += reward
    return state, observe(state), reward, state.done


class NumpadEnv:
    """Seeded, resettable wrapper around the functional Numpad API."""

    def __init__(self, n: int = 2, length: int | None = None, seed: int = 0,
                 episode_limit: int = EPISODE_LIMIT, repress_clears: bool = False, reward_once: bool = True):
        self.n = n
        self.length = n * n if length is None else length
        self.episode_limit = episode_limit
        self.repress_clears = repress_clears
        self.reward_once = reward_once
        self.rng = np.random.default_rng(seed)
        self.state: NumpadState | None = None

    @property
    def obs_size(self) -> int:
        return observation_size(self.n)

    @property
    def n_actions(self) -> int:
        return N_ACTIONS

    def reset(self) -> np.ndarray:
        self.state, obs = numpad_reset(self.n, self.length, self.rng, self.episode_limit)
        return obs

    def step(self, action: int):
        _, obs, reward, done = numpad_step(self.state, action, self.repress_clears, self.reward_once)
        return obs, reward, done


# ---------------------------------------------------------------------------
# copy task


@dataclass
class CopySample:
    """``inputs``: B symbols, delimiter, B blanks.  ``targets``: B blanks, delimiter slot, the B symbols."""

    inputs: np.ndarray
    targets: np.ndarray
    payload_len: int
    vocab: int

    @property
    def blank(self) -> int:
        return self.vocab

    @property
    def delimiter(self) -> int:
        return self.vocab + 1

    @property
    def payload_slice(self) -> slice:
        return slice(self.payload_len + 1, 2 * self.payload_len + 1)


def copy_sample(payload_len: int, vocab: int, rng: np.random.Generator) -> CopySample:
    if payload_len < 1 or vocab < 2:
        raise ContractError("copy task needs B >= 1 and V >= 2")
    payload = rng.integers(vocab, size=payload_len)
    blank, delim = vocab, vocab + 1
    blanks = np.full(payload_len, blank)
    inputs = np.concatenate([payload, [delim], blanks])
    targets = np.concatenate([blanks, [delim], payload])
    return CopySample(inputs.astype(np.int64), targets.astype(np.int64), payload_len, vocab)


def copy_batch(batch: int, payload_len: int, vocab: int, rng: np.random.Generator) -> list[CopySample]:
    return [copy_sample(payload_len, vocab, rng) for _ in range(batch)]
