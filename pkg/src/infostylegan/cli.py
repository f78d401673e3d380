"""Command-line entry point: generate-data | train | eval-metrics | verify-lemma | anomaly.

Exit status: 0 success, 1 usage or configuration error, 2 runtime or numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import anomaly as A
from . import data as D
from . import imaging
from . import latent as L
from . import lemma as Lm
from . import losses
from . import metrics as Me
from . import models as M
from .archive import ArchiveError
from .config import RESOLVED_NAME, ConfigError, RunConfig, load_config, sweep_base_seed

CHECKPOINT_NAME = "checkpoint.isgn"
DATASET_NAME = "dataset.bin"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _thread_limit():
    raw = os.environ.get("DLAB_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DLAB_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("DLAB_THREADS must be >= 0")
    if n == 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _base_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    run = getattr(args, "run", None)
    if run and (Path(run) / RESOLVED_NAME).is_file():
        return load_config(Path(run) / RESOLVED_NAME)
    return RunConfig()


# ---------------------------------------------------------------------------
# data


def _dataset(config: RunConfig, path=None) -> D.LabeledDataset:
    if path is not None:
        return D.LabeledDataset.load(_require_file(Path(path), "dataset"))
    return D.generate(config.dataset_size, config.data_seed)


def _training_images(config: RunConfig, ds: D.LabeledDataset) -> np.ndarray:
    if config.train_on == "all":
        return ds.images
    inl, out = config.split_rules()
    train, _, _ = D.anomaly_split(ds, inl, out, seed=config.data_seed)
    return train.images


def cmd_generate_data(args) -> None:
    config = _base_config(args).replace(dataset_size=args.n, data_seed=args.seed)
    out = _out_dir(args.out)
    ds = D.generate(config.dataset_size, config.data_seed)
    ds.save(out / DATASET_NAME, out / "factors.csv")
    imaging.save_image(out / "data_grid", imaging.tile(ds.images[:64], 8, 8))
    config.write(out)
    print(f"wrote {len(ds)} images to {out / DATASET_NAME}")


# ---------------------------------------------------------------------------
# train


def sample_grid(models: M.Models, seed: int) -> np.ndarray:
    """8x8 montage from a fixed set of 64 latent draws (same draws at every dump)."""
    rng = np.random.default_rng(seed)
    z = L.sample(models.config.spec, rng, 64)
    imgs = M.generate(models, z, noise_maps=M.make_noise_maps(64, rng))
    return imaging.tile(imgs, 8, 8)


def sweep_grid(models: M.Models, factor: int, seed: int, rows: int = 8) -> np.ndarray:
    """One row per fixed base draw; columns sweep factor ``factor`` over its support."""
    spec = models.config.spec
    rng = np.random.default_rng(seed)
    base = L.sample(spec, rng, rows)
    maps = M.make_noise_maps(rows, rng)
    values = L.sweep_values(spec.factors[factor])
    cols = []
    for v in values:
        c = base.c.copy()
        c[:, factor] = v
        cols.append(M.generate(models, L.make_sample(spec, base.z_prime, c), noise_maps=maps))
    tiles = [cols[j][r] for r in range(rows) for j in range(len(values))]
    return imaging.tile(tiles, rows, len(values))


def cmd_train(args) -> None:
    config = _base_config(args).replace(steps=args.steps, seed=args.seed)
    out = _out_dir(args.out)
    config.write(out)
    ds = _dataset(config, args.data)
    real = _training_images(config, ds)
    models = M.init_models(config.model_config(), seed=config.seed)
    grid_seed = sweep_base_seed(config)

    def dump(step, m, report):
        if (step + 1) % config.sample_every == 0:
            imaging.save_image(out / f"samples_{step + 1:06d}", sample_grid(m, grid_seed))

    report = losses.train(models, config.training(), real, callback=dump)
    M.save_checkpoint(models, out / CHECKPOINT_NAME)
    report.write_csv(out / "losses.csv")
    imaging.save_image(out / "samples_final", sample_grid(models, grid_seed))
    for i in range(len(config.factor)):
        imaging.save_image(out / f"sweep_C{i}", sweep_grid(models, i, grid_seed))
    from . import plotting

    if report.entries:
        spec = config.latent_spec()
        plotting.loss_curves(report, out / "loss_curves.png", spec.entropy() if spec.all_discrete else None)
    last = report.entries[-1] if report.entries else None
    print(f"{config.variant}: {config.steps} steps" + (f", final L_info {last.linfo:.4f}" if last else ""))


# ---------------------------------------------------------------------------
# eval-metrics


def _load_run(args, config: RunConfig) -> M.Models:
    run = Path(args.run)
    ckpt = Path(args.checkpoint) if getattr(args, "checkpoint", None) else run / CHECKPOINT_NAME
    _require_file(ckpt, "checkpoint")
    return M.load_checkpoint(ckpt, M.init_models(config.model_config(), seed=config.seed))


def _factor_names(spec: L.LatentSpec):
    return [f"C{i}:{f.kind}" for i, f in enumerate(spec.factors)]


def cmd_eval_metrics(args) -> None:
    config = _base_config(args).replace(seed=args.seed)
    models = _load_run(args, config)
    out = _out_dir(args.out or args.run)
    spec = config.latent_spec()
    ds = _dataset(config, args.data)
    real_pool = _training_images(config, ds)
    rng = np.random.default_rng(config.seed)
    n = min(config.metric_samples, len(real_pool))
    real = real_pool[np.sort(rng.choice(len(real_pool), n, replace=False))]
    fake = M.generate(models, L.sample(spec, rng, n), rng=rng)
    fr, ff = Me.desk_features(real), Me.desk_features(fake)
    fid = Me.fid(Me.gaussian_fit(fr), Me.gaussian_fit(ff))
    precision, recall = Me.precision_recall(fr, ff, config.pr_k)

    rows, grid = D.full_grid()
    if config.train_on == "inliers":
        keep = config.split_rules()[0](rows)
        rows, grid = rows[keep], grid[keep]
    report = Me.mig(rows, M.q_infer(models, grid), config.mc_samples, seed=config.seed,
                    inner_cap=config.inner_cap, attribute_names=D.FACTOR_NAMES, factor_names=_factor_names(spec))
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("metric", "value", "k", "seed", "n_real", "n_fake"))
        w.writerow(("fid_desk", repr(fid), "", config.seed, n, n))
        w.writerow(("precision", repr(precision), config.pr_k, config.seed, n, n))
        w.writerow(("recall", repr(recall), config.pr_k, config.seed, n, n))
        w.writerow(("mig", repr(report.mig), "", config.seed, len(rows), ""))
        w.writerow(("mig_se", repr(report.mig_se), "", config.seed, len(rows), ""))
        w.writerow(("max_mi", repr(report.max_mi), "", config.seed, len(rows), ""))
    report.write_csv(out / "mig.csv")
    from . import plotting

    plotting.mig_heatmap(report, out / "mig.png")
    config.write(out)
    print(f"fid_desk {fid:.4f}  precision {precision:.3f}  recall {recall:.3f}  MIG {report.mig:.4f}")


# ---------------------------------------------------------------------------
# verify-lemma


def cmd_verify_lemma(args) -> int:
    out = _out_dir(args.out)
    if args.channels < 1 or args.symbols < 2:
        raise UsageError("--channels must be >= 1 and --symbols >= 2")
    failures = 0
    with open(out / "lemma_checks.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("channel", "check", "lhs", "rhs", "residual", "tolerance", "passed"))
        rng = np.random.default_rng([args.seed, 1])
        for j, (prior, channel) in enumerate(Lm.random_channel_suite(args.channels, args.seed, args.symbols)):
            rep = Lm.verify_lemma_identities(prior, channel, [Lm.random_encoder(prior, args.symbols, rng)])
            for c in rep.checks:
                w.writerow((j, c.name, repr(c.lhs), repr(c.rhs), repr(c.residual), c.tolerance,
                            "pass" if c.passed else "FAIL"))
                if not c.passed:
                    failures += 1
                    print(f"channel {j}: {c.name} violated (residual {c.residual:.3e})", file=sys.stderr)
    table = [("decomposition and chain on random channels", failures == 0)]
    prior = Lm.FactoredPrior.uniform((2, 2))
    xor_gap = Lm.verify_lemma_identities(prior, Lm.xor_channel()).gap
    prod_gap = Lm.verify_lemma_identities(prior, Lm.product_channel(0.1)).gap
    table.append(("XOR channel gap = log 2", abs(xor_gap - np.log(2)) <= 1e-12))
    table.append(("product channel gap = 0", abs(prod_gap) <= 1e-12))
    try:
        points = Lm.lemma_limit_experiment(n_points=args.points)
        limit_ok = Lm.is_monotone([p.expected_tc for p in points])
    except Lm.LemmaViolation as exc:
        print(str(exc), file=sys.stderr)
        points, limit_ok = [], False
    table.append(("limit: gap = E[TC] along product-to-XOR path", limit_ok))
    if points:
        Lm.write_limit_csv(points, out / "lemma_limit.csv")
        from . import plotting

        plotting.lemma_limit_plot(points, out / "lemma_limit.png")
    with open(out / "lemma_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("check", "result"))
        for name, ok in table:
            w.writerow((name, "pass" if ok else "FAIL"))
    width = max(len(n) for n, _ in table)
    for name, ok in table:
        print(f"{name:<{width}}  {'pass' if ok else 'FAIL'}")
    return 0 if all(ok for _, ok in table) else 2


# ---------------------------------------------------------------------------
# anomaly


def cmd_anomaly(args) -> None:
    config = _base_config(args).replace(source=args.source, detector=args.detector, nu=args.nu,
                                        gamma=args.gamma, lof_k=args.k, seed=args.seed)
    models = _load_run(args, config)
    out = _out_dir(args.out or args.run)
    ds = _dataset(config, args.data)
    inl, outl = config.split_rules()
    train, test, is_out = D.anomaly_split(ds, inl, outl, seed=config.data_seed)
    name = config.variant.split("-")[0]
    res = A.run_pipeline(models, train.images, test.images, is_out, config.source, config.detector,
                         config.nu, config.gamma, config.lof_k, config.seed, config.max_train, name)
    rep = res.report
    A.write_report_csv([rep], out / "anomaly_report.csv")
    A.write_roc_csv(rep, out / "roc.csv")
    A.confusion_grid(test.images, is_out, res.predicted_outlier, out / "confusion", seed=config.seed)
    from . import plotting

    fpr, tpr = A.roc_curve(rep.scores_inlier, rep.scores_outlier)
    plotting.roc_plot([(rep.method, fpr, tpr, rep.auc)], out / "roc.png")
    config.write(out)
    print(f"{rep.method}: AUC {rep.auc:.4f} [{rep.auc_ci[0]:.4f}, {rep.auc_ci[1]:.4f}]  "
          f"acc {rep.accuracy:.4f}  F1 {rep.f1:.4f}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="infostylegan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="render the shapes dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train G, D and Q")
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--data", help="dataset.bin from generate-data (default: render from config)")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-metrics", help="desk FID, precision/recall and MIG for a run")
    e.add_argument("--run", required=True)
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--out")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval_metrics)

    v = sub.add_parser("verify-lemma", help="exact checks of the information decomposition")
    v.add_argument("--out", default=".")
    v.add_argument("--channels", type=int, default=50)
    v.add_argument("--symbols", type=int, default=8)
    v.add_argument("--points", type=int, default=11)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify_lemma)

    a = sub.add_parser("anomaly", help="embedding-based anomaly detection for a run")
    a.add_argument("--run", required=True)
    a.add_argument("--config")
    a.add_argument("--checkpoint")
    a.add_argument("--data")
    a.add_argument("--out")
    a.add_argument("--source", choices=A.SOURCES)
    a.add_argument("--detector", choices=A.DETECTORS)
    a.add_argument("--nu", type=float)
    a.add_argument("--gamma", type=float)
    a.add_argument("--k", type=int)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_anomaly)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with _thread_limit():
            code = args.func(args)
        return int(code or 0)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (losses.TrainingError, A.ConvergenceError, Lm.LemmaViolation, ArchiveError, FloatingPointError,
            ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
