"""Fit a voltage-predicting network to a dataset split."""

from __future__ import annotations

import numpy as np

from augopf.case import NetworkCase
from augopf.dataset import Dataset, input_features, output_targets, scaler_stats
from augopf.nn import EpochRecord, MlpModel, Scaler, TrainConfig, init_mlp, train

SCHEMES = ("augmented", "baseline")


def _scalers(case: NetworkCase, train_ds: Dataset, augmented: bool) -> tuple[Scaler, Scaler]:
    stats = train_ds.meta.get("scalers", {})
    x_stats = stats.get("input") or scaler_stats(input_features(train_ds, True))
    y_stats = stats.get("output") or scaler_stats(output_targets(train_ds, case.slack))
    n_in = 2 * case.n_bus + (2 * case.n_gen + 2 * case.n_bus if augmented else 0)
    x_sc = Scaler(np.array(x_stats["mean"])[:n_in], np.array(x_stats["scale"])[:n_in])
    return x_sc, Scaler.from_stats(y_stats)


def build_model(case: NetworkCase, train_ds: Dataset, hidden, augmented: bool = True, seed: int = 0) -> MlpModel:
    """Untrained network sized for ``case``; magnitudes squashed into ``[vmin, vmax]``."""
    x_sc, y_sc = _scalers(case, train_ds, augmented)
    nb = case.n_bus
    a = case.arrays
    lo = np.concatenate([a.vmin, np.full(nb - 1, np.nan)])
    hi = np.concatenate([a.vmax, np.full(nb - 1, np.nan)])
    sizes = [x_sc.mean.size, *[int(h) for h in hidden], 2 * nb - 1]
    model = init_mlp(sizes, seed=seed, input_scaler=x_sc, output_scaler=y_sc, head_lo=lo, head_hi=hi)
    model.info["scheme"] = "augmented" if augmented else "baseline"
    model.info["case"] = case.name
    return model


def holdout_loads(ds: Dataset, fraction: float) -> tuple[Dataset, Dataset | None]:
    """Move the last ``fraction`` of load ids (sorted) into a validation set."""
    loads = np.unique(ds.load_ids)
    n_val = int(round(fraction * loads.size))
    if fraction <= 0 or n_val == 0 or n_val >= loads.size:
        return ds, None
    in_val = np.isin(ds.load_ids, loads[loads.size - n_val:])
    return ds.select(~in_val), ds.select(in_val)


def fit_model(case: NetworkCase, train_ds: Dataset, hidden, augmented: bool, config: TrainConfig,
              seed: int = 0, val_fraction: float = 0.1, log_every: int = 0,
              logger=None) -> tuple[MlpModel, list[EpochRecord]]:
    """Train on the converged records of ``train_ds``.

    The last ``val_fraction`` of train loads only feeds the validation column
    of the history; there is no early stopping.
    """
    train_ds = train_ds.select(train_ds.converged)
    fit_ds, val_ds = holdout_loads(train_ds, val_fraction)
    if len(fit_ds) == 0:
        raise ValueError("no converged records to train on")
    model = build_model(case, train_ds, hidden, augmented, seed)
    x = model.input_scaler.transform(input_features(fit_ds, augmented))
    t = model.output_scaler.transform(output_targets(fit_ds, case.slack))
    xv = tv = None
    if val_ds is not None:
        xv = model.input_scaler.transform(input_features(val_ds, augmented))
        tv = model.output_scaler.transform(output_targets(val_ds, case.slack))
    return train(model, x, t, config, xv, tv, log_every=log_every, logger=logger)
