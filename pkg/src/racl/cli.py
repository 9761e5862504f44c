"""Command-line entry point: ``racl {synth,reconstruct,train,eval,verify,schema}``.

Exit codes: 0 success, 1 runtime error (including partially failed rows),
2 configuration error or refused artifact mix, 3 verification failure.
Explicit flags override the config file; ``RACL_SEED`` sits in between.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from racl.audio import ManifestRow, manifest_metadata, read_manifest, write_manifest
from racl.config import RunConfig, config_schema, from_dict, load_config
from racl.errors import ConfigError, RaclError

log = logging.getLogger("racl")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2, 3


class Refused(ConfigError):
    """Artifacts produced under incompatible configurations."""


def _prepare_out(out: Path, owned: list[str], overwrite: bool) -> Path:
    """Create ``out``; existing outputs of this command are removed only with --overwrite."""
    out.mkdir(parents=True, exist_ok=True)
    present = [name for name in owned if (out / name).exists()]
    if present and not overwrite:
        raise RaclError(f"{out} already holds {', '.join(present)}; pass --overwrite to replace")
    for name in present:
        target = out / name
        shutil.rmtree(target) if target.is_dir() else target.unlink()
    return out


def _config(args, overrides: dict | None = None) -> RunConfig:
    overrides = dict(overrides or {})
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    return load_config(getattr(args, "config", None), overrides)


def _read_manifests(paths, cfg: RunConfig | None = None) -> list[ManifestRow]:
    rows = []
    for p in paths:
        meta = manifest_metadata(p)
        if cfg is not None and "signal_hash" in meta and meta["signal_hash"] != cfg.signal_hash():
            raise Refused(f"{p} was reconstructed under different audio/spectrogram/seed settings "
                          f"(signal_hash {meta['signal_hash'][:12]} != {cfg.signal_hash()[:12]})")
        rows.extend(read_manifest(p))
    return rows


def _report_errors(errors: list[str], what: str) -> None:
    if errors:
        print(f"{len(errors)} {what} failed:", file=sys.stderr)
        for e in errors:
            print(f"  {e}", file=sys.stderr)


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    from racl.synthcorpus import SPLITS, CorpusSpec, generate

    spec = CorpusSpec(n_per_class=args.n, seed=args.seed)
    owned = ["wav", "pools", "manifest.tsv"] + [f"{name}.tsv" for name, _ in SPLITS]
    out = _prepare_out(Path(args.out), owned, args.overwrite)
    rows = generate(spec, out, workers=args.workers, pools=not args.no_pools)
    print(f"wrote {len(rows)} clips to {out / 'wav'}")
    print(f"manifests: {', '.join(str(out / n) for n in owned[2:])}")
    if not args.no_pools:
        print(f"augmentation pools: {out / 'pools'}")
    return EXIT_OK


# ---------------------------------------------------------------- reconstruct

def cmd_reconstruct(args) -> int:
    from racl.reconstruct import reconstruct_manifest

    cfg = _config(args)
    names = [Path(m).stem for m in args.manifest]
    if len(set(names)) != len(names):
        raise ConfigError("input manifests must have distinct file names")
    owned = ["wav"] + [f"{n}.tsv" for n in names]
    if args.merge:
        owned += [f"{n}_merged.tsv" for n in names]
    out = _prepare_out(Path(args.out_dir), owned, args.overwrite)
    meta = {"config_hash": cfg.hash(), "signal_hash": cfg.signal_hash()}
    all_errors = []
    for path, name in zip(args.manifest, names):
        rows = read_manifest(path)
        rec, errors = reconstruct_manifest(rows, out / "wav", cfg.spectrogram, cfg.train.seed,
                                           cfg.audio.target_len, workers=args.workers)
        write_manifest(out / f"{name}.tsv", rec, meta)
        if args.merge:
            ok = {r.source_id for r in rec}
            kept = [r for r in rows if f"{r.source_id}_rec" in ok]
            write_manifest(out / f"{name}_merged.tsv", kept + rec, meta)
        print(f"{path}: {len(rec)} reconstructed, {len(errors)} failed -> {out / f'{name}.tsv'}")
        all_errors += errors
    _report_errors(all_errors, "rows")
    return EXIT_RUNTIME if all_errors else EXIT_OK


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    from racl.model import save_checkpoint
    from racl.plotting import plot_loss_curves
    from racl.train import ablate, train, write_log

    overrides = {}
    if args.epochs is not None:
        overrides["train.epochs"] = args.epochs
    if args.batch_size is not None:
        overrides["train.batch_size"] = args.batch_size
    cfg = _config(args, overrides)
    if args.ablate:
        try:
            cfg = cfg.replace(losses=ablate(cfg.losses, [t.strip() for t in args.ablate.split(",") if t]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    train_rows = _read_manifests(args.train, cfg)
    dev_rows = _read_manifests(args.dev, cfg)

    owned = ["checkpoints", "final.ckpt", "train_log.tsv", "resolved_config.json", "figures"]
    out = _prepare_out(Path(args.out), owned, args.overwrite)
    resolved = {"config_hash": cfg.hash(), "config": cfg.to_dict()}
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")

    def progress(row):
        print(f"epoch {row['epoch']:3d}  lr {row['lr']:.3g}  train {row['train_total']:.4f}  "
              f"dev {row['dev_total']:.4f}", flush=True)

    result = train(cfg, train_rows, dev_rows, out, workers=args.workers,
                   progress=None if args.quiet else progress)
    save_checkpoint(out / "final.ckpt", result.final)
    write_log(out / "train_log.tsv", result.log, cfg.hash())
    plot_loss_curves(result.log, out / "figures" / "loss_curves.png")
    print(f"averaged epochs {result.window} -> {out / 'final.ckpt'} (dev loss {result.final.val_loss:.4f})")
    print(f"config_hash {cfg.hash()}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    from racl.evaluation import build_report, score_manifest, write_embeddings, write_scores
    from racl.model import load_checkpoint
    from racl.plotting import plot_distance_matrix, plot_error_rates, plot_score_histograms

    ckpt = load_checkpoint(args.checkpoint)
    cfg = from_dict(ckpt.config)
    if cfg.hash() != ckpt.config_hash:
        raise Refused(f"{args.checkpoint}: embedded config does not match its hash")
    if args.config is not None:
        given = load_config(args.config)
        if given.hash() != ckpt.config_hash:
            raise Refused(f"{args.config} (hash {given.hash()[:12]}) does not match the checkpoint's "
                          f"training config (hash {ckpt.config_hash[:12]})")
    rows = _read_manifests(args.manifest, cfg)
    if not args.subset_col:
        rows = [ManifestRow(r.path, r.provenance, "all") for r in rows]

    owned = ["scores.tsv", "embeddings.tsv", "report.json", "figures"]
    out = _prepare_out(Path(args.out), owned, args.overwrite)
    scored = score_manifest(rows, ckpt.params, cfg, workers=args.workers)
    _report_errors(scored.errors, "rows")
    if not scored.records:
        raise RaclError("no manifest row could be scored")
    report = build_report(scored, cfg)
    h = cfg.hash()
    write_scores(out / "scores.tsv", scored.records, h)
    write_embeddings(out / "embeddings.tsv", scored.records, scored.embeddings, h)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    figs = out / "figures"
    plot_score_histograms(scored.records, figs / "score_histograms.png")
    plot_error_rates(scored.records, figs / "error_rates.png")
    plot_distance_matrix(report.distances, figs / "distance_matrix.png")

    print("subset\tEER%")
    for name, value in report.subsets.items():
        print(f"{name}\t{'n/a' if value is None else f'{value:.3f}'}")
    print(f"average\t{report.average_eer:.3f}")
    print(f"pooled\t{report.pooled_eer:.3f}")
    d = report.distances
    if d["bona_vs_rec_bona"] is not None:
        print(f"bona_vs_rec_bona distance\t{d['bona_vs_rec_bona']:.4f}")
    print(f"scored {report.n_scored}, failed {report.n_failed} -> {out / 'report.json'}")
    return EXIT_OK if not scored.errors else EXIT_RUNTIME


# ---------------------------------------------------------------- verify / schema

def cmd_verify(args) -> int:
    from racl.verify import run_checks

    return EXIT_OK if run_checks() else EXIT_VERIFY


def cmd_schema(args) -> int:
    if args.which == "config":
        schema = config_schema()
    else:
        from racl.evaluation import report_schema

        schema = report_schema()
    print(json.dumps(schema, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="racl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_flag="--out", config=True, seed=True):
        sp.add_argument(out_flag, required=True, type=Path)
        sp.add_argument("--workers", type=int, default=1, help="worker threads; results do not depend on it")
        sp.add_argument("--overwrite", action="store_true", help="replace outputs from a previous run")
        if config:
            sp.add_argument("--config", type=Path, help="JSON run config (defaults if omitted)")
        if seed:
            sp.add_argument("--seed", type=int, help="override train.seed")

    sp = sub.add_parser("synth", help="generate the synthetic bona fide / spoof corpus")
    sp.add_argument("--n", type=int, default=200, help="clips per class")
    sp.add_argument("--seed", type=int, default=688)
    sp.add_argument("--no-pools", action="store_true", help="skip the augmentation pools")
    common(sp, config=False, seed=False)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("reconstruct", help="mel + Griffin-Lim resynthesis of manifest rows")
    sp.add_argument("--manifest", nargs="+", required=True, type=Path)
    sp.add_argument("--merge", action="store_true", help="also write original + reconstructed manifests")
    common(sp, out_flag="--out-dir")
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("train", help="train aggregation + head with the RACL objective")
    sp.add_argument("--train", nargs="+", required=True, type=Path)
    sp.add_argument("--dev", nargs="+", required=True, type=Path)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--ablate", default="", help="comma list of std,enh,reg terms to zero")
    sp.add_argument("--quiet", action="store_true", help="no per-epoch lines")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score manifests and write EER / distance reports")
    sp.add_argument("--manifest", nargs="+", required=True, type=Path)
    sp.add_argument("--checkpoint", required=True, type=Path)
    sp.add_argument("--subset-col", action="store_true",
                    help="group EERs by the manifest subset column instead of pooling")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("verify", help="run the invariant suite")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("schema", help="print the JSON schema of the run config or the eval report")
    sp.add_argument("which", choices=("config", "report"))
    sp.set_defaults(func=cmd_schema)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RaclError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
