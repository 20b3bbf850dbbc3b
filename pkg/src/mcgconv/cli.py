"""Command-line entry point.

Commands: ``basis dump``, ``check``, ``mge``, ``converge``, ``train``,
``eval``.  Every command is deterministic given config plus seed; outputs
land in a run directory named by the config hash and each CSV carries the
hash in a leading comment line.  Exit codes: 0 success, 1 runtime
failure, 2 configuration error.

``MCG_THREADS`` caps BLAS worker threads; it is applied before numpy is
imported, which is why heavyweight imports here live inside functions.
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_cap():
    cap = os.environ.get("MCG_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcgconv",
        description="Group-equivariant convolution experiments",
    )
    parser.add_argument("--config", required=True, help="path to a key=value config")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default="runs", help="output root directory")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)

    basis = sub.add_parser("basis", help="filter bank inspection")
    basis.add_argument("action", choices=["dump"])
    sub.add_parser("check", help="run the built-in invariant suites")
    sub.add_parser("mge", help="measure the mean equivariance error")
    sub.add_parser("converge", help="Monte Carlo convergence study")
    sub.add_parser("train", help="train a model at desk scale")
    evalp = sub.add_parser("eval", help="evaluate a saved checkpoint")
    evalp.add_argument("--checkpoint", required=True)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    args = _build_parser().parse_args(argv)

    from .checkpoint import CheckpointError, CheckpointHashMismatch
    from .config import ConfigError

    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointHashMismatch as exc:
        print(f"checkpoint/config mismatch: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    from .config import load_config

    overrides = {"seed": args.seed} if args.seed is not None else None
    cfg = load_config(args.config, overrides)
    run_dir = os.path.join(args.out, cfg.hash)
    os.makedirs(run_dir, exist_ok=True)
    say = (lambda *a: None) if args.quiet else print

    if args.command == "basis":
        return cmd_basis_dump(cfg, run_dir, say)
    if args.command == "check":
        return cmd_check(cfg, say)
    if args.command == "mge":
        return cmd_mge(cfg, run_dir, say)
    if args.command == "converge":
        return cmd_converge(cfg, run_dir, say)
    if args.command == "train":
        return cmd_train(cfg, run_dir, say)
    if args.command == "eval":
        return cmd_eval(cfg, run_dir, args.checkpoint, say)
    raise AssertionError(f"unhandled command {args.command}")


def _write_csv(path, config_hash, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(value) -> str:
    if isinstance(value, float):
        # plain-float repr keeps CSVs identical across numpy scalar types
        return repr(float(value))
    return str(value)


def _raster_blocks(path, config_hash, rasters):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        for grid in rasters:
            for row in grid:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
            fh.write("\n")


def cmd_basis_dump(cfg, run_dir, say) -> int:
    import numpy as np

    from .affine import TransformParams, sample_transforms
    from .basis import BasisSpec, build_basis, rasterize

    bank = build_basis(
        BasisSpec(cfg["basis.kind"], cfg["basis.kernel_size"], cfg["basis.num_basis"])
    )
    ref_path = os.path.join(run_dir, "basis_reference.csv")
    _raster_blocks(ref_path, cfg.hash, bank.rasters)

    ranges = cfg.sample_ranges()
    if ranges.is_degenerate():
        t = TransformParams()
    else:
        t = sample_transforms(ranges, 1, cfg["seed"])[0]
    warped = np.stack([rasterize(bank, j, t) for j in range(bank.num_basis)])
    tr_path = os.path.join(run_dir, "basis_transformed.csv")
    _raster_blocks(tr_path, cfg.hash, warped)
    say(f"wrote {ref_path} and {tr_path}")
    return 0


def cmd_check(cfg, say) -> int:
    import numpy as np

    from .affine import (
        GroupElement,
        SampleRanges,
        TransformParams,
        act_on_point,
        group_inverse,
        group_product,
        sample_transforms,
        transform_matrix,
    )
    from .basis import dirac_basis
    from .harness import MGEConfig, mge
    from .layers import make_layer_params, make_standard_conv, wmcg_backward, wmcg_forward

    failures = []

    def suite(name, ok, detail=""):
        say(f"{'PASS' if ok else 'FAIL'} {name}" + (f" ({detail})" if detail else ""))
        if not ok:
            failures.append(name)

    # group axioms on commuting sub-families
    rng_rot = SampleRanges(-0.5, 0.5, 2.0, 0.0)
    rng_shear = SampleRanges(-0.5, 0.5, 0.0, 0.4)
    worst = 0.0
    for family_seed, ranges in ((1, rng_rot), (2, rng_shear)):
        draws = sample_transforms(ranges, 300, family_seed)
        rng = np.random.Generator(np.random.Philox(family_seed))
        xs = rng.uniform(-5, 5, size=(100, 3, 2))
        for i in range(100):
            g1, g2, g3 = (
                GroupElement((xs[i, j, 0], xs[i, j, 1]), draws[3 * i + j])
                for j in range(3)
            )
            lhs = group_product(group_product(g1, g2), g3)
            rhs = group_product(g1, group_product(g2, g3))
            worst = max(worst, max(abs(lhs.x[0] - rhs.x[0]), abs(lhs.x[1] - rhs.x[1])))
            rt = group_product(g1, group_inverse(g1))
            worst = max(worst, abs(rt.x[0]), abs(rt.x[1]), abs(rt.a.alpha))
            p = (float(xs[i, 0, 0]), float(xs[i, 1, 1]))
            q1 = act_on_point(group_product(g1, g2), p)
            q2 = act_on_point(g1, act_on_point(g2, p))
            worst = max(worst, abs(q1[0] - q2[0]), abs(q1[1] - q2[1]))
    suite("group-axioms", worst < 1e-9, f"max deviation {worst:.2e}")

    # analytic gradient against finite differences
    rng = np.random.Generator(np.random.Philox(7))
    params = make_layer_params(dirac_basis(3), 2, 2, seed=3, padding=1)
    x = rng.standard_normal((1, 2, 6, 6))
    gout = rng.standard_normal(wmcg_forward(x, params).shape)
    _, gw = wmcg_backward(x, params, gout)
    eps, bad = 1e-5, 0.0
    flat = params.weights.ravel()
    for idx in range(0, flat.size, 7):
        old = flat[idx]
        flat[idx] = old + eps
        up = float(np.sum(wmcg_forward(x, params) * gout))
        flat[idx] = old - eps
        dn = float(np.sum(wmcg_forward(x, params) * gout))
        flat[idx] = old
        fd = (up - dn) / (2 * eps)
        bad = max(bad, abs(fd - gw.ravel()[idx]) / max(1.0, abs(fd)))
    suite("gradient-check", bad < 1e-6, f"max rel err {bad:.2e}")

    # one-hot bank + identity transforms reproduce plain convolution
    kern = rng.standard_normal((2, 2, 3, 3))
    params = make_standard_conv(2, 2, 3, weights=kern.reshape(2, 2, 9), padding=1)
    from .conv import conv2d_forward

    direct = conv2d_forward(x, kern, padding=1)
    suite(
        "conv-degeneration",
        bool(np.array_equal(wmcg_forward(x, params), direct)),
    )

    # equivariance error vanishes for identity transforms
    conv_params = make_standard_conv(1, 2, 3, seed=5, padding=1)
    images = rng.standard_normal((4, 1, 16, 16))
    cfg_id = MGEConfig(shear_max=0.0, scale_lo=1.0, scale_hi=1.0, theta_max=0.0,
                       num_samples=4, seed=9)
    _, norm, _ = mge(lambda im: wmcg_forward(im, conv_params), images, cfg_id, crop=3)
    suite("mge-identity", norm < 1e-10, f"normalized mge {norm:.2e}")

    return 0 if not failures else 1


def cmd_mge(cfg, run_dir, say) -> int:
    from .config import ConfigError
    from .harness import MGEConfig, mge
    from .layers import wmcg_forward
    from .models import build_datasets, build_model

    if not cfg.layers:
        raise ConfigError("mge needs model.layer.0 to define the measured layer")
    model = build_model(cfg)
    first = None
    from .layers import ConvLayer

    for layer in model.layers:
        if isinstance(layer, ConvLayer):
            first = layer
            break
    if first is None:
        raise ConfigError("mge measures the first conv-style layer; none found")
    params = first.params
    k = params.kernel_size
    if params.stride != 1 or params.padding != (k - 1) // 2:
        raise ConfigError("mge needs the measured layer at stride 1, same padding")
    _, test = build_datasets(cfg)
    images = test.images[: cfg["mge.num_samples"]]
    mcfg = MGEConfig(
        shear_max=cfg["mge.shear_max"], scale_lo=cfg["mge.scale_lo"],
        scale_hi=cfg["mge.scale_hi"], theta_max=cfg["mge.theta_max"],
        num_samples=images.shape[0], seed=cfg["seed"],
    )
    crop = cfg["mge.crop"] or k
    raw, norm, rows = mge(lambda im: wmcg_forward(im, params), images, mcfg, crop)
    path = os.path.join(run_dir, "mge.csv")
    _write_csv(path, cfg.hash, "seed,image_idx,mge_raw,mge_norm",
               [(cfg["seed"], i, r, nv) for i, r, nv in rows])
    say(f"mge_raw={raw:.6g} mge_norm={norm:.6g} -> {path}")
    return 0


def cmd_converge(cfg, run_dir, say) -> int:
    from .basis import BasisSpec, build_basis
    from .harness import make_filter_patch_integrand, mc_convergence_study

    ranges = cfg.sample_ranges()
    if cfg["converge.integrand"] == "constant":
        integrand = lambda t: 1.0  # noqa: E731 - tiny throwaway integrand
    else:
        bank = build_basis(
            BasisSpec(cfg["basis.kind"], cfg["basis.kernel_size"],
                      cfg["basis.num_basis"])
        )
        integrand = make_filter_patch_integrand(bank, 0)
    result = mc_convergence_study(
        integrand, ranges, cfg["converge.n_list"], cfg["converge.seeds"],
        seed=cfg["seed"], ref_points=cfg["converge.ref_points"],
    )
    path = os.path.join(run_dir, "convergence.csv")
    _write_csv(path, cfg.hash, "N,seed,abs_err", result.rows)
    slope = "undefined" if result.slope is None else f"{result.slope:.4f}"
    say(f"median errors {result.medians}; log-log slope {slope} -> {path}")
    return 0


def cmd_train(cfg, run_dir, say) -> int:
    from .checkpoint import save_checkpoint
    from .models import (
        build_datasets,
        build_model,
        loss_fn_for,
        task_of,
        test_metric_fn,
        train_arrays,
    )
    from .training import Schedule, TrainConfig, evaluate_loss, train_loop

    task = task_of(cfg)
    train_data, test_data = build_datasets(cfg)
    model = build_model(cfg)
    inputs, targets = train_arrays(task, train_data)
    schedule = Schedule(cfg["optim.schedule"], cfg["optim.lr"],
                        cfg["optim.final_lr"], max(cfg["optim.epochs"], 1))
    tcfg = TrainConfig(
        epochs=cfg["optim.epochs"], batch_size=cfg["optim.batch"],
        schedule=schedule, momentum=cfg["optim.momentum"],
        weight_decay=cfg["optim.weight_decay"], seed=cfg["seed"],
    )
    loss_fn = loss_fn_for(task)
    history = train_loop(model, inputs, targets, tcfg, loss_fn,
                         metric_fn=test_metric_fn(task, test_data))
    metrics_path = os.path.join(run_dir, "metrics.csv")
    _write_csv(metrics_path, cfg.hash, "epoch,step,lr,loss,metric",
               [(h.epoch, h.step, h.lr, h.loss, h.metric) for h in history])
    if task == "classify":
        _write_csv(os.path.join(run_dir, "classify.csv"), cfg.hash,
                   "epoch,error_pct", [(h.epoch, h.metric) for h in history])
    final_loss = evaluate_loss(model, inputs, targets, loss_fn)
    with open(os.path.join(run_dir, "final_loss.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={cfg.hash}\n{final_loss!r}\n")
    ckpt_path = os.path.join(run_dir, "checkpoint.bin")
    save_checkpoint(ckpt_path, cfg.hash, model.state_arrays())
    say(f"trained {len(history)} epochs; final train loss {final_loss!r}; "
        f"checkpoint -> {ckpt_path}")
    return 0


def cmd_eval(cfg, run_dir, checkpoint_path, say) -> int:
    from .checkpoint import load_checkpoint
    from .models import (
        build_datasets,
        build_model,
        denoise_psnrs,
        loss_fn_for,
        predict_batched,
        task_of,
        train_arrays,
    )
    from .harness import classification_error
    from .training import evaluate_loss

    task = task_of(cfg)
    train_data, test_data = build_datasets(cfg)
    model = build_model(cfg)
    _, arrays = load_checkpoint(checkpoint_path, expect_hash=cfg.hash)
    model.load_state(arrays)
    inputs, targets = train_arrays(task, train_data)
    loss = evaluate_loss(model, inputs, targets, loss_fn_for(task))
    with open(os.path.join(run_dir, "eval_loss.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={cfg.hash}\n{loss!r}\n")
    if task == "denoise":
        values = denoise_psnrs(model, test_data)
        _write_csv(os.path.join(run_dir, "denoise.csv"), cfg.hash, "sigma,psnr",
                   list(zip((float(s) for s in test_data.sigmas), values)))
        say(f"train loss {loss!r}; test psnr mean {values.mean():.3f} dB")
    else:
        err = classification_error(
            predict_batched(model, test_data.images), test_data.labels
        )
        say(f"train loss {loss!r}; test error {err:.2f}%")
    return 0


if __name__ == "__main__":
    sys.exit(main())
