"""Assemble models and datasets from an experiment configuration.

The builder walks the ordered ``model.layer.<i>`` descriptors, inserting a
rectifier between consecutive blocks, lift/average adapters around
transform-axis segments, and a global-average-pool plus dense head for
classification tasks.  Denoising models predict the noise residual, so no
rectifier follows the final layer.

Per-axis grid semantics for ``gcnn`` layers: the descriptor count ``n``
applies to every transform axis with nonzero configured width (axes of
zero width stay collapsed), so mixed ranges produce a cartesian grid.
``mcg`` layers draw ``n`` input transforms and one output transform from
independent seeded streams.
"""

from __future__ import annotations

import numpy as np

from .affine import sample_transforms
from .basis import BasisSpec, build_basis
from .config import ConfigError, ExperimentConfig
from .datasets import (
    Dataset,
    load_cifar_binary,
    load_idx,
    make_denoise_dataset,
    make_shapes_dataset,
)
from .harness import classification_error, psnr
from .layers import (
    ConvLayer,
    DenseLayer,
    GlobalAvgPoolLayer,
    GroupConvLayer,
    LiftLayer,
    ReluLayer,
    Sequential,
    TransformMeanLayer,
    make_bottleneck,
    make_layer_params,
    make_standard_conv,
    subseed,
    transform_grid,
)
from .training import cross_entropy, mse_loss

TASK_CLASSIFY = "classify"
TASK_DENOISE = "denoise"


def task_of(cfg: ExperimentConfig) -> str:
    kind = cfg["data.kind"]
    return TASK_DENOISE if kind == "gaussian_denoise" else TASK_CLASSIFY


def num_classes_of(cfg: ExperimentConfig) -> int:
    return 4 if cfg["data.kind"] == "shapes_classify" else 10


def _bank_for(cfg: ExperimentConfig, spec):
    k = spec.opt_int("k", cfg["basis.kernel_size"])
    if cfg["basis.kind"] == "dirac":
        nb = k * k
    else:
        nb = spec.opt_int("nb", min(cfg["basis.num_basis"], k * k))
    return build_basis(BasisSpec(cfg["basis.kind"], k, nb)), k


def build_model(cfg: ExperimentConfig) -> Sequential:
    if not cfg.layers:
        raise ConfigError("model has no layers (set model.layer.0 = ...)")
    ranges = cfg.sample_ranges()
    seed = cfg["seed"]
    task = task_of(cfg)
    layers = []
    group_open = False
    for i, spec in enumerate(cfg.layers):
        lseed = subseed(seed, 100 + i)
        name = f"l{i}_{spec.kind}"
        if spec.kind in ("conv", "wmcg", "bottleneck") and group_open:
            layers.append(TransformMeanLayer(name=f"l{i}_tmean"))
            group_open = False
        if i > 0:
            layers.append(ReluLayer(name=f"l{i}_relu"))

        if spec.kind == "conv":
            k = spec.opt_int("k", 3)
            params = make_standard_conv(
                spec.opt_int("in"), spec.opt_int("out"), k,
                seed=lseed, stride=spec.opt_int("stride", 1),
                padding=spec.opt_int("pad", (k - 1) // 2),
                groups=spec.opt_int("groups", 1),
            )
            layers.append(ConvLayer(params, name=name))
        elif spec.kind == "wmcg":
            bank, k = _bank_for(cfg, spec)
            params = make_layer_params(
                bank, spec.opt_int("in"), spec.opt_int("out"),
                ranges=ranges, seed=lseed, stride=spec.opt_int("stride", 1),
                padding=spec.opt_int("pad", (k - 1) // 2),
                groups=spec.opt_int("groups", 1),
            )
            layers.append(ConvLayer(params, name=name))
        elif spec.kind in ("gcnn", "mcg"):
            bank, k = _bank_for(cfg, spec)
            params = make_layer_params(
                bank, spec.opt_int("in"), spec.opt_int("out"),
                ranges=None, seed=lseed, stride=spec.opt_int("stride", 1),
                padding=spec.opt_int("pad", (k - 1) // 2),
                groups=spec.opt_int("groups", 1),
            )
            n = spec.opt_int("n", 4)
            if spec.kind == "gcnn":
                counts = (
                    n if ranges.alpha_hi > ranges.alpha_lo else 1,
                    n if ranges.theta_max > 0.0 else 1,
                    n if ranges.shear_max > 0.0 else 1,
                )
                grid = transform_grid(ranges, counts)
                in_tr, out_tr = grid, grid
            else:
                in_tr = sample_transforms(ranges, n, subseed(seed, 200 + i))
                out_tr = sample_transforms(ranges, 1, subseed(seed, 300 + i))
            if not group_open:
                layers.append(LiftLayer(name=f"l{i}_lift"))
                group_open = True
            layers.append(GroupConvLayer(params, in_tr, out_tr, name=name))
        elif spec.kind == "bottleneck":
            bank, k = _bank_for(cfg, spec)
            block = make_bottleneck(
                bank, spec.opt_int("ch"), spec.opt_int("mid"),
                ranges=ranges if cfg["basis.kind"] == "fourier_bessel" else None,
                seed=lseed, padding=spec.opt_int("pad", (k - 1) // 2),
                groups=spec.opt_int("groups", 1),
                residual=bool(spec.opt_int("residual", 1)),
                activation=spec.options.get("act", "relu"),
            )
            from .layers import BottleneckLayer

            layers.append(BottleneckLayer(block, name=name))
        else:
            raise ConfigError(f"unhandled layer kind {spec.kind!r}")
    if group_open:
        layers.append(TransformMeanLayer(name="tail_tmean"))
    if task == TASK_CLASSIFY:
        layers.append(ReluLayer(name="head_relu"))
        layers.append(GlobalAvgPoolLayer(name="head_gap"))
        last_width = _last_channel_width(cfg)
        layers.append(
            DenseLayer(last_width, num_classes_of(cfg),
                       seed=subseed(seed, 999), name="head_dense")
        )
    return Sequential(layers)


def _last_channel_width(cfg: ExperimentConfig) -> int:
    spec = cfg.layers[-1]
    if spec.kind == "bottleneck":
        return spec.opt_int("ch")
    return spec.opt_int("out")


def build_datasets(cfg: ExperimentConfig):
    kind = cfg["data.kind"]
    seed = cfg["seed"]
    image_size = cfg["data.image_size"] or None
    if kind == "shapes_classify":
        train = make_shapes_dataset(cfg["data.size"], subseed(seed, 11),
                                    image_size or 24, "train")
        test = make_shapes_dataset(cfg["data.test_size"], subseed(seed, 12),
                                   image_size or 24, "test")
        return train, test
    if kind == "gaussian_denoise":
        rng = (cfg["data.sigma_lo"], cfg["data.sigma_hi"])
        train = make_denoise_dataset(cfg["data.size"], rng, subseed(seed, 11),
                                     image_size or 41, "train")
        test = make_denoise_dataset(cfg["data.test_size"], rng, subseed(seed, 12),
                                    image_size or 41, "test")
        return train, test
    if kind == "idx":
        data = load_idx(cfg["data.path"], cfg["data.labels_path"] or None)
        return data, data
    if kind == "cifar":
        data = load_cifar_binary(cfg["data.path"])
        return data, data
    raise ConfigError(f"unknown data.kind {kind!r}")


def train_arrays(task: str, data: Dataset):
    """(inputs, targets) pair fed to the train loop."""
    if task == TASK_CLASSIFY:
        if data.labels is None:
            raise ConfigError("classification task needs labeled data")
        return data.images, data.labels
    if data.targets is None:
        raise ConfigError("denoising task needs clean reference targets")
    return data.images, data.images - data.targets  # predict the noise


def loss_fn_for(task: str):
    return cross_entropy if task == TASK_CLASSIFY else mse_loss


def predict_batched(model: Sequential, images: np.ndarray,
                    batch: int = 64) -> np.ndarray:
    outs = [
        model.predict(images[i:i + batch]) for i in range(0, images.shape[0], batch)
    ]
    return np.concatenate(outs, axis=0)


def test_metric_fn(task: str, test: Dataset):
    """Per-epoch metric: error %% for classification, mean PSNR for denoising."""
    if task == TASK_CLASSIFY:
        def metric(model):
            return classification_error(
                predict_batched(model, test.images), test.labels
            )
    else:
        def metric(model):
            return float(np.mean(denoise_psnrs(model, test)))
    return metric


def denoise_psnrs(model: Sequential, test: Dataset) -> np.ndarray:
    """Per-image PSNR of ``noisy - predicted_noise`` against the clean target."""
    residual = predict_batched(model, test.images)
    denoised = test.images - residual
    return np.array([
        psnr(denoised[i], test.targets[i], peak=1.0) for i in range(len(test))
    ])
