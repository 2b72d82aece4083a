"""Multi-channel keyed classifier: build, train, predict, evaluate.

A system is a grid of J transform groups x I branches. Every channel owns a
keyed preprocessor and its own classifier trained on preprocessed inputs;
inference sums the per-channel softmax vectors and takes the argmax. All
keys derive from the system's master key, so the whole system is a
deterministic function of (mode, master key, arch, data, hyper).

Modes:
  identity                  - J=1, passthrough channels (keyless baseline)
  direct-permutation        - J=1, keyed pixel permutations
  dct-sign-flip-3band       - J=3, keyed sign flips in sub-bands V, H, D
  dct-hard-threshold-3band  - J=3, zeroed sub-bands V, H, D
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .dataio import LabeledSet
from .nn import ArchSpec, Hyper, ModelParams, forward, init_params, train
from .rng import TAG_INIT, TAG_SHUFFLE, MasterKey, derive_subkey
from .transforms import Preprocessor, make_preprocessor, preprocess_batch, subband_rect

MODES = ("identity", "direct-permutation", "dct-sign-flip-3band",
         "dct-hard-threshold-3band")

# Group index -> sub-band for the 3-band modes.
GROUP_BANDS = ("V", "H", "D")

REJECT = -1


def _mode_groups(mode: str) -> int:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    return 3 if mode.endswith("3band") else 1


def _channel_kind(mode: str) -> str:
    return {
        "identity": "identity",
        "direct-permutation": "direct-permutation",
        "dct-sign-flip-3band": "dct-sign-flip",
        "dct-hard-threshold-3band": "dct-hard-threshold",
    }[mode]


@dataclass(frozen=True)
class ChannelSpec:
    """One (preprocessor, classifier) chain at grid position (j, i)."""

    j: int
    i: int
    preprocessor: Preprocessor
    arch: ArchSpec
    params: ModelParams | None = None

    @property
    def trained(self) -> bool:
        return self.params is not None


@dataclass(frozen=True)
class SystemSpec:
    """A J x I channel grid with summation aggregation."""

    master: MasterKey
    mode: str
    groups: int
    branches: int
    size: int
    colors: int
    arch: ArchSpec
    channels: tuple[ChannelSpec, ...]
    reject_threshold: float | None = None

    @property
    def classes(self) -> int:
        return self.arch.classes

    @property
    def trained(self) -> bool:
        return all(c.trained for c in self.channels)


def build_system(mode: str, master: MasterKey, groups: int, branches: int,
                 arch: ArchSpec, size: int, colors: int,
                 reject_threshold: float | None = None,
                 per_color: bool = False) -> SystemSpec:
    """Create the J x I channel grid with keyed preprocessors and init params.

    `groups` must match the mode (1 for identity/direct-permutation, 3 for
    the sub-band modes). Channel (j, i) derives its preprocessor, its weight
    init, and later its shuffle order from lineage (j, i) under the master
    key.
    """
    expected_groups = _mode_groups(mode)
    if groups != expected_groups:
        raise ValueError(f"mode {mode!r} requires {expected_groups} group(s), got {groups}")
    if branches < 1:
        raise ValueError("need at least one branch per group")
    if arch.input_dim != size * size * colors:
        raise ValueError(f"arch input_dim {arch.input_dim} does not match "
                         f"{size}x{size}x{colors} images")
    kind = _channel_kind(mode)
    channels = []
    for j in range(groups):
        band = subband_rect(GROUP_BANDS[j], size) if kind.startswith("dct") else None
        for i in range(branches):
            pre = make_preprocessor(kind, master, j, i, size, colors,
                                    subband=band, per_color=per_color)
            params = init_params(arch, derive_subkey(master, j, i, TAG_INIT))
            channels.append(ChannelSpec(j, i, pre, arch, params))
    return SystemSpec(master, mode, groups, branches, size, colors, arch,
                      tuple(channels), reject_threshold)


def train_system(system: SystemSpec, trainset: LabeledSet, hyper: Hyper,
                 workers: int = 1) -> SystemSpec:
    """Train every channel independently on its preprocessed inputs.

    Channels share nothing mutable, so they may train in parallel; the
    result is identical either way because each channel's randomness comes
    only from its own derived keys.
    """
    if not system.channels:
        raise ValueError("system has no channels")
    if len(trainset) == 0:
        raise ValueError("training set is empty")
    if trainset.size != system.size or trainset.colors != system.colors:
        raise ValueError("training set shape does not match the system")

    def train_one(channel: ChannelSpec) -> ChannelSpec:
        inputs = preprocess_batch(channel.preprocessor, trainset.images)
        key = derive_subkey(system.master, channel.j, channel.i, TAG_SHUFFLE)
        params = train(channel.params, (inputs, trainset.labels), hyper, key)
        return replace(channel, params=params)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trained = tuple(pool.map(train_one, system.channels))
    else:
        trained = tuple(train_one(c) for c in system.channels)
    return replace(system, channels=trained)


def predict_batch(system: SystemSpec, images: np.ndarray) -> np.ndarray:
    """Aggregate score vectors for a (B, N, N, m) batch: sum of channel softmaxes."""
    for channel in system.channels:
        if not channel.trained:
            raise ValueError(f"channel ({channel.j}, {channel.i}) is untrained")
    total = None
    batch = images.shape[0]
    for channel in system.channels:
        transformed = preprocess_batch(channel.preprocessor, images)
        scores = forward(channel.params, transformed.reshape(batch, -1))
        total = scores if total is None else total + scores
    return total


def predict(system: SystemSpec, x: np.ndarray) -> np.ndarray:
    """Aggregate score vector for one image. Entries sum to the channel count."""
    return predict_batch(system, np.asarray(x)[np.newaxis])[0]


def classify_batch(system: SystemSpec, images: np.ndarray) -> np.ndarray:
    """Class decisions for a batch; REJECT where the threshold says so.

    The argmax tie-break is the smallest class index. With a reject
    threshold t, a sample is rejected when max_score / channel_count < t.
    """
    scores = predict_batch(system, images)
    decisions = scores.argmax(axis=1)
    if system.reject_threshold is not None:
        normalized = scores.max(axis=1) / len(system.channels)
        decisions = np.where(normalized < system.reject_threshold, REJECT, decisions)
    return decisions


def classify(system: SystemSpec, x: np.ndarray) -> int:
    """Class index for one image, or REJECT."""
    return int(classify_batch(system, np.asarray(x)[np.newaxis])[0])


def evaluate(system: SystemSpec, testset: LabeledSet, limit: int) -> float:
    """Error rate in percent over the first `limit` samples (file order).

    Rejected samples count as errors.
    """
    if len(testset) == 0:
        raise ValueError("test set is empty")
    if limit > len(testset):
        raise ValueError(f"limit {limit} exceeds test set size {len(testset)}")
    images = testset.images[:limit]
    labels = testset.labels[:limit]
    decisions = classify_batch(system, images)
    return float(np.mean(decisions != labels) * 100.0)


def rebuild_preprocessors(system: SystemSpec, master: MasterKey) -> SystemSpec:
    """The same system with preprocessors re-derived under a different key.

    Channel parameters are kept. This models an evaluator holding the wrong
    secret key; with keyed modes the decisions should collapse to chance.
    """
    channels = []
    for channel in system.channels:
        old = channel.preprocessor
        pre = make_preprocessor(old.kind, master, channel.j, channel.i,
                                old.size, old.colors, subband=old.subband,
                                l=old.l if old.kind == "dct-subsample" else None,
                                per_color=old.per_color)
        channels.append(replace(channel, preprocessor=pre))
    return replace(system, master=master, channels=tuple(channels))
