"""Array-backed sample sets shared by the synthetic generator and the panel pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, ShapeError


@dataclass
class SampleSet:
    """A batch of (window, target) pairs ready for training or evaluation.

    features: (T, W, d); masks: (T, W, d) binary; targets: (T, N);
    base_log_price: (T,) log price at the window's last day (for
    directional metrics); true_latents optionally carries DGP ground truth.
    """

    features: np.ndarray
    masks: np.ndarray
    targets: np.ndarray
    horizons: tuple[int, ...]
    base_log_price: np.ndarray | None = None
    true_latents: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.masks = np.asarray(self.masks, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        if self.features.shape[:1] != self.targets.shape[:1]:
            raise ShapeError("features and targets must have matching sample counts")
        if self.features.shape != self.masks.shape:
            raise ShapeError("features and masks must share shape")

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx) -> "SampleSet":
        return SampleSet(
            features=self.features[idx],
            masks=self.masks[idx],
            targets=self.targets[idx],
            horizons=self.horizons,
            base_log_price=None if self.base_log_price is None else self.base_log_price[idx],
            true_latents=None if self.true_latents is None else self.true_latents[idx],
        )


def build_windows(values: np.ndarray, masks: np.ndarray, log_prices: np.ndarray,
                  horizons: tuple[int, ...], window: int,
                  true_latents: np.ndarray | None = None) -> SampleSet:
    """Slice a T x d panel into overlapping look-back windows with targets.

    A sample exists for every t with a full window behind it and the longest
    horizon ahead of it.
    """
    values = np.asarray(values, dtype=float)
    masks = np.asarray(masks, dtype=float)
    log_prices = np.asarray(log_prices, dtype=float)
    t_len = values.shape[0]
    max_h = max(horizons)
    starts = range(window - 1, t_len - max_h)
    if len(range(window - 1, t_len - max_h)) <= 0:
        raise InvalidArgumentError("panel too short for the requested window/horizons")
    feats, msk, tgt, base, lat = [], [], [], [], []
    for t in starts:
        feats.append(values[t - window + 1:t + 1])
        msk.append(masks[t - window + 1:t + 1])
        tgt.append([log_prices[t + h] for h in horizons])
        base.append(log_prices[t])
        if true_latents is not None:
            lat.append(true_latents[t])
    return SampleSet(
        features=np.array(feats), masks=np.array(msk), targets=np.array(tgt),
        horizons=tuple(horizons), base_log_price=np.array(base),
        true_latents=np.array(lat) if true_latents is not None else None,
    )


def chronological_split(samples: SampleSet, train_frac: float = 0.7,
                        val_frac: float = 0.15) -> dict[str, SampleSet]:
    """Time-ordered train/validation/test split (no shuffling across the boundary)."""
    n = len(samples)
    n_train = int(n * train_frac)
    n_val = int(n * val_frac)
    if min(n_train, n_val, n - n_train - n_val) <= 0:
        raise InvalidArgumentError("sample set too small to split")
    return {
        "train": samples.subset(slice(0, n_train)),
        "val": samples.subset(slice(n_train, n_train + n_val)),
        "test": samples.subset(slice(n_train + n_val, n)),
    }
