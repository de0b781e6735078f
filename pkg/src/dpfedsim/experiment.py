"""Turn an ExperimentConfig into a model spec, client shards and runnable pieces."""
from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from . import rng as rngs
from .config import DatasetSpec, ExperimentConfig
from .datasets import (
    BUNDLED_MNIST,
    Dataset,
    load_mnist,
    load_power_csv,
    partition_iid,
    partition_noniid,
    synth_classification,
    synth_regression,
    train_test_split,
)
from .federated import FederatedData, build_federated_data
from .nn import ModelSpec
from .privacy import PrivacyParams

log = logging.getLogger(__name__)


def _data_seed(seed: int) -> int:
    return int(rngs.stream(seed, "data").integers(2**31))


def load_dataset(ds: DatasetSpec, seed: int) -> tuple[Dataset, Dataset | None]:
    """Return (pool, test); ``test`` is None when the pool still needs splitting."""
    if ds.kind == "mnist":
        if ds.images or ds.labels:
            if not (ds.images and ds.labels):
                raise ValueError("dataset.images and dataset.labels must be given together")
            X, y = load_mnist(ds.images, ds.labels)
        else:
            X, y = load_mnist(*BUNDLED_MNIST)
        test = None
        if ds.test_images and ds.test_labels:
            Xt, yt = load_mnist(ds.test_images, ds.test_labels)
            test = Dataset(standardize_pixels(Xt), yt, "classification")
        return Dataset(standardize_pixels(X), y, "classification"), test
    if ds.kind == "power_consumption":
        pw = load_power_csv(ds.path, ds.target)
        return Dataset(pw.features, pw.target, "regression"), None
    if ds.kind == "synthetic_classification":
        return synth_classification(ds.n, ds.dim, ds.classes, ds.margin, _data_seed(seed)), None
    if ds.kind == "synthetic_regression":
        return synth_regression(ds.n, ds.dim, ds.noise_std, _data_seed(seed)), None
    raise ValueError(f"unknown dataset kind {ds.kind!r}")


# pixel statistics of the MNIST training set, applied to every split alike
MNIST_MEAN = 0.1307
MNIST_STD = 0.3081


def standardize_pixels(X: np.ndarray) -> np.ndarray:
    return (X - MNIST_MEAN) / MNIST_STD


def build_task(cfg: ExperimentConfig, seed: int | None = None) -> tuple[ModelSpec, FederatedData]:
    seed = cfg.seed if seed is None else seed
    ds = cfg.dataset
    pool, test = load_dataset(ds, seed)
    if test is None:
        train, test = train_test_split(pool, ds.test_fraction, rngs.stream(seed, "split"))
    else:
        train = pool
    K = cfg.fl.total_clients
    part_rng = rngs.stream(seed, "partition")
    if ds.partition_scheme == "noniid":
        if ds.task != "classification":
            raise ValueError("non-IID partitioning needs class labels")
        part = partition_noniid(train.targets, K, ds.shards_per_client, part_rng)
    else:
        part = partition_iid(len(train), K, part_rng)
    out_dim = int(pool.targets.max()) + 1 if ds.task == "classification" else 1
    if ds.task == "classification" and ds.kind == "synthetic_classification":
        out_dim = ds.classes
    spec = ModelSpec((train.inputs.shape[1], cfg.model.width(ds.task), out_dim), ds.task)
    log.info("task %s: %d train / %d test samples over %d clients",
             ds.kind, len(train), len(test), K)
    return spec, build_federated_data(train, test, K, part)


def privacy_params(cfg: ExperimentConfig, epsilon: float | None = None) -> PrivacyParams:
    p = cfg.privacy
    return PrivacyParams(p.epsilon if epsilon is None else epsilon, p.delta_round, p.sensitivity)


def fl_for_seed(cfg: ExperimentConfig, seed: int):
    return replace(cfg.fl, master_seed=seed)
