"""``tpgan`` command line: train, generate, evaluate, diagnose and ablate.

Exit codes: 0 on success, 1 for usage or configuration errors, 2 when the
command fails at run time. Set ``TPGAN_DETERMINISTIC=1`` to force
deterministic kernels regardless of the config.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import identity_mixup as im
from . import trainer
from .core import (CheckpointError, ConfigError, RandomStream, ResolutionProfile, TrainConfig,
                   deterministic_from_env, dump_config, load_config, set_deterministic)
from .data import DataError, generate_sprite_corpus, load_manifest
from .generator import export_pyramid
from .metrics import MetricError, affinity_matrix

log = logging.getLogger("tpgan")

METRIC_NAMES = ("fid", "is", "vs")


class UsageError(Exception):
    pass


@dataclass
class CommandResult:
    code: int = 0
    artifacts: list[Path] = field(default_factory=list)


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; this CLI reserves 2 for run-time failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- helpers ------------------------------------------------------------------

def _synthetic(identities: int, per_identity: int, seed: int, prof: ResolutionProfile):
    return generate_sprite_corpus(identities, per_identity, prof, RandomStream(seed))


def _corpus_for(args, state: trainer.TrainState):
    """Corpus from --data, or the synthetic corpus recorded in the checkpoint."""
    prof = state.profile
    if getattr(args, "data", None):
        return load_manifest(args.data, prof)
    info = state.data_info
    if info.get("kind") == "manifest":
        return load_manifest(info["path"], prof)
    if info.get("kind") == "synthetic":
        return _synthetic(info["identities"], info["images_per_identity"], info["seed"], prof)
    raise UsageError("checkpoint does not record its data; pass --data")


def _load(path: str) -> trainer.TrainState:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    state = trainer.load_state(path)
    set_deterministic(deterministic_from_env(state.cfg.deterministic))
    return state


def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _generate(state: trainer.TrainState, captions: list[str], seed: int) -> list[torch.Tensor]:
    return state.models.sample(captions, RandomStream(seed))


# -- commands -----------------------------------------------------------------

def cmd_train(args) -> CommandResult:
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg, prof = load_config(args.config)
    else:
        cfg, prof = TrainConfig.desk(), ResolutionProfile.desk()
    overrides = {k: v for k, v in (("rng_seed", args.seed), ("epochs", args.epochs)) if v is not None}
    cfg = replace(cfg, **overrides)
    cfg = replace(cfg, deterministic=deterministic_from_env(cfg.deterministic))
    out = Path(args.out)
    if args.resume:
        state = _load(args.resume)
        if args.epochs is not None:
            state.models.cfg = replace(state.cfg, epochs=args.epochs)
        corpus = _corpus_for(args, state)
    else:
        if args.data:
            corpus = load_manifest(args.data, prof)
            info = {"kind": "manifest", "path": str(Path(args.data).resolve())}
        else:
            corpus = _synthetic(args.identities, args.images_per_identity, cfg.rng_seed, prof)
            info = {"kind": "synthetic", "identities": args.identities,
                    "images_per_identity": args.images_per_identity, "seed": cfg.rng_seed}
        state = trainer.init_state(corpus, cfg, prof)
        state.data_info = info
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_config(state.cfg, state.profile), encoding="utf-8")
    result = trainer.train(corpus, state.cfg, state.profile, out_dir=out, resume=state,
                           max_steps=args.max_steps,
                           on_eval=lambda e: log.info("epoch %d: validation FID %s", e["epoch"], e["fid"]))
    artifacts = [out / "config.toml", out / "train_log.jsonl", result.checkpoint]
    if (out / "best.ckpt").exists():
        artifacts.append(out / "best.ckpt")
    if not args.skip_metrics and result.state.epoch >= result.state.cfg.epochs:
        report = trainer.evaluate_state(result.state, corpus, seed=state.cfg.rng_seed)
        (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
        artifacts.append(out / "metrics.json")
        print(report.to_json())
    return CommandResult(0, artifacts)


def cmd_generate(args) -> CommandResult:
    if args.n < 1:
        raise UsageError("--n must be ≥ 1")
    if not args.text.strip():
        raise UsageError("--text must be a non-empty caption")
    state = _load(args.checkpoint)
    levels = _generate(state, [args.text] * args.n, args.seed)
    written = export_pyramid(levels, args.out)
    print(f"wrote {args.n} pyramid(s) to {args.out}")
    return CommandResult(0, written)


def _parse_metrics(text: str) -> list[str]:
    names = [t.strip().lower() for t in text.split(",") if t.strip()]
    unknown = sorted(set(names) - set(METRIC_NAMES))
    if not names or unknown:
        raise UsageError(f"unknown metric(s) {unknown or [text]}; choose from {','.join(METRIC_NAMES)}")
    return [n for n in METRIC_NAMES if n in names]


def cmd_evaluate(args) -> CommandResult:
    metrics = _parse_metrics(args.metrics)
    state = _load(args.checkpoint)
    corpus = _corpus_for(args, state)
    report = trainer.evaluate_state(state, corpus, metrics, seed=args.seed)
    text = report.to_json()
    print(text)
    artifacts = []
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        artifacts.append(Path(args.out))
    return CommandResult(0, artifacts)


def embedding_coordinates(feats: np.ndarray, seed: int = 0) -> tuple[np.ndarray, np.ndarray | None]:
    """2-D PCA coordinates, plus t-SNE coordinates when there are enough points."""
    centred = feats - feats.mean(0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    pca = centred @ vt[:2].T
    if pca.shape[1] < 2:
        pca = np.pad(pca, ((0, 0), (0, 2 - pca.shape[1])))
    if len(feats) < 5:
        return pca, None
    from sklearn.manifold import TSNE

    perplexity = float(min(30.0, (len(feats) - 1) / 3))
    tsne = TSNE(2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(feats)
    return pca, tsne


def cmd_diagnose(args) -> CommandResult:
    if args.identities < 1 or args.samples < 2:
        raise UsageError("--identities must be ≥ 1 and --samples ≥ 2")
    state = _load(args.checkpoint)
    pool = sorted(state.identity_captions)
    if not pool:
        raise UsageError("checkpoint holds no identity captions")
    if args.identities > len(pool):
        raise UsageError(f"--identities {args.identities} exceeds the {len(pool)} trained identities")
    rng = RandomStream(args.seed)
    chosen = sorted(int(i) for i in rng["diagnose"].choice(pool, size=args.identities, replace=False))
    ext = state.models.feature_extractor()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts, rho_rows, feats_all, owners = [], [], [], []
    for ident in chosen:
        caption = state.identity_captions[ident][0]
        images = state.models.sample([caption] * args.samples, rng)[0]
        feats = ext(images)
        rho_rows.append((ident, im.correlation_ratio(feats), len(feats), caption))
        artifacts.append(_write_csv(out / f"affinity_{ident}.csv", [f"s{k}" for k in range(len(feats))],
                                    affinity_matrix(feats).round(6).tolist()))
        feats_all.append(feats)
        owners += [ident] * len(feats)
    artifacts.insert(0, _write_csv(out / "rho.csv", ["identity_id", "rho", "num_samples", "caption"], rho_rows))
    allf = np.concatenate(feats_all)
    centroids = np.stack([f.mean(0) for f in feats_all])
    if len(centroids) > 1:
        artifacts.append(_write_csv(out / "affinity_identities.csv", ["identity_id", *chosen],
                                    [[i, *row] for i, row in zip(chosen, affinity_matrix(centroids).round(6).tolist())]))
    pca, tsne = embedding_coordinates(allf, args.seed)
    rows = []
    for k, ident in enumerate(owners):
        row = [ident, *pca[k].round(6)]
        row += list(tsne[k].round(6)) if tsne is not None else ["", ""]
        rows.append(row)
    artifacts.append(_write_csv(out / "embedding.csv", ["identity_id", "pca_1", "pca_2", "tsne_1", "tsne_2"], rows))
    for ident, rho, _, caption in rho_rows:
        print(f"identity {ident}: rho = {rho:.4f}  ({caption})")
    return CommandResult(0, artifacts)


def parse_sweep(text: str) -> list[float]:
    key, sep, values = text.partition("=")
    if not sep or key.strip() != "alpha":
        raise UsageError("--sweep must look like alpha=0.1,0.2,0.4,0.5")
    try:
        alphas = [float(v) for v in values.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"bad alpha value in --sweep: {e}") from None
    if not alphas:
        raise UsageError("--sweep lists no alpha values")
    if any(a <= 0 for a in alphas):
        raise UsageError("alpha values must be > 0")
    return alphas


def cmd_ablate(args) -> CommandResult:
    alphas = parse_sweep(args.sweep)
    try:
        budgets = sorted({int(v) for v in args.epochs.split(",") if v.strip()})
    except ValueError:
        raise UsageError("--epochs must be a comma-separated list of integers") from None
    if not budgets or budgets[0] < 1:
        raise UsageError("--epochs needs positive integers")
    rng = RandomStream(args.seed)
    if args.checkpoint:
        state = _load(args.checkpoint)
        prof = state.profile
        idents = sorted(state.identity_captions)
        captions = [state.identity_captions[i][0] for i in idents for _ in range(args.samples_per_identity)]
        levels = state.models.sample(captions, rng)
        labels = np.repeat(np.arange(len(idents)), args.samples_per_identity)
        source = "generated"
    else:
        prof = ResolutionProfile.desk()
        corpus = _synthetic(args.identities, args.samples_per_identity, args.seed, prof)
        levels = [torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2))) for x in corpus.pyramid()]
        labels = corpus.labels([r.identity_id for r in corpus.records])
        source = "real"
    rows = im.mixup_probe(levels, labels, alphas, budgets, rng, prof=prof)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = _write_csv(out / "ablation.csv", ["alpha", "epochs", "accuracy", "source"],
                      [(r["alpha"], r["epochs"], f"{r['accuracy']:.4f}", source) for r in rows])
    print("alpha  epochs  accuracy")
    for r in rows:
        print(f"{r['alpha']:<6} {r['epochs']:<7} {100 * r['accuracy']:.2f}%")
    return CommandResult(0, [path])


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tpgan", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a generator", description="Train on a manifest or the synthetic corpus.")
    t.add_argument("--config", help="TOML config with [train] and [profile] tables (default: desk preset)")
    src = t.add_mutually_exclusive_group()
    src.add_argument("--data", help="JSON-lines manifest of captioned images")
    src.add_argument("--synthetic", action="store_true", help="use the procedural sprite corpus (default)")
    t.add_argument("--out", required=True, help="output directory for checkpoints, log and metrics")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--seed", type=int, help="override the config's rng_seed")
    t.add_argument("--epochs", type=int, help="override the config's epoch count")
    t.add_argument("--max-steps", type=int, help="stop after this many steps (a resumable checkpoint is written)")
    t.add_argument("--identities", type=int, default=20, help="synthetic corpus: number of identities")
    t.add_argument("--images-per-identity", type=int, default=54, help="synthetic corpus: images per identity")
    t.add_argument("--skip-metrics", action="store_true", help="do not compute the final metric report")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample image pyramids for a caption",
                       description="Write N pyramids for one caption as PNGs.")
    g.add_argument("--checkpoint", required=True, help="trained checkpoint")
    g.add_argument("--text", required=True, help="caption to condition on")
    g.add_argument("--n", type=int, default=4, help="number of samples")
    g.add_argument("--seed", type=int, default=0, help="noise seed")
    g.add_argument("--out", required=True, help="output directory (one scale_<i> directory per level)")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="compute FID / IS / VS", description="Print a metric report as JSON.")
    e.add_argument("--checkpoint", required=True, help="trained checkpoint")
    e.add_argument("--data", help="manifest to evaluate on (default: the training corpus)")
    e.add_argument("--metrics", default="fid,is,vs", help="comma-separated subset of fid,is,vs")
    e.add_argument("--seed", type=int, default=0, help="sampling seed")
    e.add_argument("--out", help="also write the JSON report here")
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("diagnose", help="correlation ratios, affinities and embeddings",
                       description="Sample N images for each of K identities and write diagnostic CSVs.")
    d.add_argument("--checkpoint", required=True, help="trained checkpoint")
    d.add_argument("--identities", type=int, default=10, help="number of identities K")
    d.add_argument("--samples", type=int, default=100, help="samples per identity N")
    d.add_argument("--seed", type=int, default=0, help="sampling seed")
    d.add_argument("--out", default="diagnostics", help="output directory")
    d.set_defaults(func=cmd_diagnose)

    a = sub.add_parser("ablate", help="mix-up probe accuracy across alpha",
                       description="Fit a probe on mix-upped samples for each alpha and report accuracy.")
    a.add_argument("--sweep", default="alpha=0.1,0.2,0.4,0.5", help="alpha values, e.g. alpha=0.1,0.2")
    a.add_argument("--checkpoint", help="generate samples from this checkpoint (default: real sprites)")
    a.add_argument("--epochs", default="2,4", help="comma-separated probe epoch budgets")
    a.add_argument("--samples-per-identity", type=int, default=54, help="samples per identity")
    a.add_argument("--identities", type=int, default=20, help="identities when no checkpoint is given")
    a.add_argument("--seed", type=int, default=0, help="seed for sampling, pairing and lambda")
    a.add_argument("--out", default="ablation", help="output directory")
    a.set_defaults(func=cmd_ablate)
    return p


def run(argv: Sequence[str] | None = None) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return CommandResult(int(e.code or 0))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print("invalid config:", file=sys.stderr)
        for v in e.violations:
            print(f"  - {v}", file=sys.stderr)
        return CommandResult(1)
    except UsageError as e:
        print(f"tpgan {args.command}: {e}", file=sys.stderr)
        return CommandResult(1)
    except (CheckpointError, DataError, MetricError, trainer.TrainingDiverged, OSError, ValueError,
            RuntimeError) as e:
        print(f"tpgan {args.command}: failed: {e}", file=sys.stderr)
        return CommandResult(2)


def main(argv: Sequence[str] | None = None) -> int:
    return run(argv).code


if __name__ == "__main__":
    sys.exit(main())
