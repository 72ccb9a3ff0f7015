from __future__ import annotations

# main.py
import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

from pydantic import ValidationError

from charts import emit_charts
from config import TrainConfig, __version__, load_config, load_environment, load_split, save_split
from container import FormatError
from dataset_ingest import (
    DatasetCache,
    IngestionError,
    default_train_count,
    ingest_omniglot,
    load_cache,
    save_cache,
    split_classes,
    synth_glyphs,
    views_for_split,
)
from episode_env import ProtocolError, SamplingError
from eval_probe import run_probe, run_sweep, write_probe_csv, write_sweep_csv
from guardrails import NumericalAbort
from lstm_q_model import load_params, save_params
from metrics import CsvMetricsSink
from observability import emit_event, write_manifest
from optimizer import load_state, save_state
from tensor_core import DimensionError, Rng
from trainer import evaluate, gradient_check, train, train_supervised

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3
GRADCHECK_TOLERANCE = 1e-5
GRADCHECK_HIDDEN = (4, 8, 16)


class UsageError(Exception):
    """Raised for invalid command-line usage."""


class GradientCheckFailed(RuntimeError):
    """Raised when analytic and numeric gradients disagree beyond tolerance."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _now() -> datetime:
    return datetime.now(timezone.utc)


def _rinc_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"--rinc expects comma-separated numbers, got '{text}'") from e
    if not values:
        raise argparse.ArgumentTypeError("--rinc needs at least one value")
    return values


def _config_from_args(args: argparse.Namespace) -> TrainConfig:
    """Flag > config file > defaults. Without --config, a manifest beside --params is used."""
    path = getattr(args, "config", None)
    params_path = getattr(args, "params", None)
    if path is None and params_path is not None and Path(params_path).with_name("manifest.json").exists():
        path = Path(params_path).with_name("manifest.json")
    config = load_config(path)
    return config.with_overrides(
        seed=getattr(args, "seed", None),
        workers=getattr(args, "workers", None),
        total_batches=getattr(args, "batches", None),
        eval_batches=getattr(args, "eval_batches", None),
        hidden=getattr(args, "hidden", None),
        batch_size=getattr(args, "batch_size", None),
    )


def _dataset_path(args: argparse.Namespace) -> Path:
    if getattr(args, "dataset", None):
        return Path(args.dataset)
    return load_environment() / "omniglot.aosl"


def _load_views(args: argparse.Namespace, seed: int) -> tuple[Any, Any, dict[str, Any]]:
    dataset = _dataset_path(args)
    cache = load_cache(dataset)
    if getattr(args, "split", None):
        split = load_split(Path(args.split))
        source = str(args.split)
    else:
        split = split_classes(cache, Rng(seed), default_train_count(len(cache.classes)))
        source = "derived"
    train_view, test_view = views_for_split(cache, split)
    info = {"dataset": str(dataset), "split": source, "train_classes": len(split.train_ids), "test_classes": len(split.test_ids)}
    return train_view, test_view, info


def _finish(
    args: argparse.Namespace,
    out_dir: Path,
    started: datetime,
    outputs: list[Path],
    config: Optional[TrainConfig] = None,
    seed: Optional[int] = None,
    extra: Optional[dict[str, Any]] = None,
    manifest_name: str = "manifest.json",
) -> None:
    manifest = write_manifest(
        out_dir,
        command=args.command,
        argv=list(getattr(args, "argv", [])),
        config=config.model_dump() if config is not None else None,
        seed=config.seed if config is not None else seed,
        workers=config.workers if config is not None else 1,
        version=__version__,
        started=started,
        finished=_now(),
        outputs=[p.name for p in outputs],
        extra=extra,
        name=manifest_name,
    )
    print(f"[Klart]: {args.command} skrev {', '.join(p.name for p in outputs)} och {manifest}")


def _write_json(path: Path, payload: dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def ingest_command(args: argparse.Namespace) -> None:
    started = _now()
    out = Path(args.out) if args.out else load_environment() / "omniglot.aosl"
    cache = ingest_omniglot(Path(args.source), out)
    print(f"[Inläsning]: {len(cache.classes)} klasser, {cache.image_count} bilder -> {out}")
    _finish(args, out.parent, started, [out], seed=None, manifest_name=f"{out.name}.manifest.json")


def synth_command(args: argparse.Namespace) -> None:
    started = _now()
    out = Path(args.out) if args.out else load_environment() / "synth.aosl"
    cache: DatasetCache = synth_glyphs(Rng(args.seed).child("synth"), args.classes, args.examples)
    save_cache(cache, out)
    print(f"[Syntes]: {len(cache.classes)} klasser, {cache.image_count} bilder -> {out}")
    _finish(args, out.parent, started, [out], seed=args.seed, manifest_name=f"{out.name}.manifest.json")


def split_command(args: argparse.Namespace) -> None:
    started = _now()
    dataset = _dataset_path(args)
    cache = load_cache(dataset)
    n_train = args.n_train if args.n_train is not None else default_train_count(len(cache.classes))
    split = split_classes(cache, Rng(args.seed), n_train)
    out = Path(args.out) if args.out else dataset.with_suffix(".split.json")
    save_split(split, out)
    emit_event("split_created", dataset=str(dataset), train=len(split.train_ids), test=len(split.test_ids), out=str(out))
    print(f"[Uppdelning]: {len(split.train_ids)} tränings- / {len(split.test_ids)} testklasser -> {out}")
    _finish(args, out.parent, started, [out], seed=args.seed, manifest_name=f"{out.name}.manifest.json")


def train_command(args: argparse.Namespace) -> None:
    started = _now()
    config = _config_from_args(args)
    train_view, test_view, info = _load_views(args, config.seed)
    out = Path(args.out)
    params = adam = None
    if args.params:
        params = load_params(Path(args.params))
        adam_path = Path(args.params).with_name("adam.bin")
        adam = load_state(adam_path) if adam_path.exists() else None

    metrics_path = out / "metrics.csv"
    resume_at = None if params is None else (adam.t if adam is not None else 0)
    with CsvMetricsSink(metrics_path, resume_at=resume_at) as sink:
        try:
            result = train(config, train_view, test_view, sink=sink, params=params, adam=adam)
        except NumericalAbort as e:
            if e.params is not None:
                save_params(e.params, out / "abort_snapshot.bin")
            _write_json(out / "abort_snapshot.json", {"batch": e.batch_index, "loss": repr(e.loss), **e.snapshot})
            raise

    save_params(result.params, out / "w.bin")
    save_state(result.adam, out / "adam.bin")
    summary = _write_json(out / "eval_summary.json", result.eval_counts.to_dict())
    _finish(args, out, started, [out / "w.bin", out / "adam.bin", metrics_path, summary], config=config, extra=info)


def train_supervised_command(args: argparse.Namespace) -> None:
    started = _now()
    config = _config_from_args(args)
    train_view, test_view, info = _load_views(args, config.seed)
    out = Path(args.out)
    metrics_path = out / "metrics_supervised.csv"
    with CsvMetricsSink(metrics_path) as sink:
        result = train_supervised(config, train_view, test_view, sink=sink)
    save_params(result.params, out / "w_supervised.bin")
    summary = _write_json(
        out / "supervised_summary.json",
        {
            **result.counts.to_dict(),
            "accuracy_after_first": result.accuracy_after_first,
            "label_rate_pct": 100.0,
            "max_softmax_error": result.max_softmax_error,
        },
    )
    print(f"[Övervakad]: träffsäkerhet {result.accuracy}")
    _finish(
        args, out, started, [out / "w_supervised.bin", metrics_path, summary], config=config, extra=info,
        manifest_name="manifest_supervised.json",
    )


def eval_command(args: argparse.Namespace) -> None:
    started = _now()
    params = load_params(Path(args.params))
    config = _config_from_args(args).with_overrides(hidden=params.hidden_size)
    _, test_view, info = _load_views(args, config.seed)
    out = Path(args.out) if args.out else Path(args.params).parent / "eval"
    metrics_path = out / "metrics.csv"
    with CsvMetricsSink(metrics_path) as sink:
        counts, _ = evaluate(params, test_view, config, sink=sink)
    summary = _write_json(out / "eval_summary.json", counts.to_dict())
    print(f"[Utvärdering]: träffsäkerhet {counts.accuracy}, förfrågningar {counts.request_rate}")
    _finish(args, out, started, [metrics_path, summary], config=config, extra={**info, "params": str(args.params)})


def probe_command(args: argparse.Namespace) -> None:
    started = _now()
    params = load_params(Path(args.params))
    config = _config_from_args(args).with_overrides(hidden=params.hidden_size)
    _, test_view, info = _load_views(args, config.seed)
    out = Path(args.out) if args.out else Path(args.params).parent
    result = run_probe(
        params, test_view, args.prefix, n_episodes=args.episodes,
        rng=Rng(config.seed).child("probe", args.prefix), rewards=config.rewards,
    )
    probe_path = out / f"probe_{args.prefix}.csv"
    write_probe_csv(result, probe_path)
    print(f"[Sond]: förfrågningar per steg (%): {', '.join(f'{p:.1f}' for p in result.request_pct)}")
    _finish(
        args, out, started, [probe_path], config=config,
        extra={**info, "params": str(args.params)}, manifest_name=f"manifest_probe_{args.prefix}.json",
    )


def sweep_command(args: argparse.Namespace) -> None:
    started = _now()
    config = _config_from_args(args)
    train_view, test_view, info = _load_views(args, config.seed)
    out = Path(args.out)
    rows = run_sweep(config, args.rinc, train_view, test_view, supervised=args.supervised)
    sweep_path = out / "sweep.csv"
    write_sweep_csv(rows, sweep_path)
    for row in rows:
        print(f"[Svep]: {' | '.join(row.csv_row())}")
    _finish(args, out, started, [sweep_path], config=config, extra={**info, "r_inc": args.rinc})


def gradcheck_command(args: argparse.Namespace) -> None:
    started = _now()
    root = Rng(args.seed).child("gradcheck")
    results = {f"H={h}": gradient_check(root.child(i), h) for i, h in enumerate(GRADCHECK_HIDDEN)}
    worst = max(r["max"] for r in results.values())
    worst_entry = max(r.get("max_entrywise", 0.0) for r in results.values())
    for name, errors in results.items():
        print(f"[Gradientkontroll]: {name} max relativt fel {errors['max']:.3e}")
    print(f"[Gradientkontroll]: max relativt fel {worst:.3e} (per element {worst_entry:.3e})")
    emit_event(
        "gradcheck_result", max_relative_error=worst, max_entrywise_error=worst_entry, tolerance=GRADCHECK_TOLERANCE
    )
    if args.out:
        out = Path(args.out)
        path = _write_json(
            out / "gradcheck.json",
            {"max_relative_error": worst, "max_entrywise_error": worst_entry, "configs": results},
        )
        _finish(args, out, started, [path], seed=args.seed)
    if worst > GRADCHECK_TOLERANCE:
        raise GradientCheckFailed(f"max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:.0e}")


def charts_command(args: argparse.Namespace) -> None:
    started = _now()
    run_dir = Path(args.out)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"Run directory not found: {run_dir}")
    written = emit_charts(run_dir)
    if not written:
        print(f"[Diagram]: inga CSV-filer att rita i {run_dir}")
    for p in written:
        print(f"[Diagram]: {p}")
    _finish(args, run_dir, started, written, seed=None, manifest_name="manifest_charts.json")


def _add_run_flags(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON-konfiguration eller manifest.json")
    p.add_argument("--out", type=Path, required=out_required, help="Utdatakatalog")
    p.add_argument("--seed", type=int, help="Slumpfrö (åsidosätter konfigurationen)")
    p.add_argument("--workers", type=int, help="Antal parallella rollout-arbetare (standard 1)")
    p.add_argument("--dataset", type=Path, help="Datasetcache (standard $METALABEL_DATA_DIR/omniglot.aosl)")
    p.add_argument("--split", type=Path, help="Klassuppdelning (JSON)")
    p.add_argument("--batches", type=int, help="Antal träningsbatcher")
    p.add_argument("--eval-batches", type=int, help="Antal utvärderingsbatcher")
    p.add_argument("--hidden", type=int, help="Antal dolda LSTM-enheter")
    p.add_argument("--batch-size", type=int, help="Episoder per batch")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metalabel", description="Aktiv one-shot-inlärning med Q-nätverk")
    sub = parser.add_subparsers(dest="command", required=True, help="Tillgängliga kommandon")

    p = sub.add_parser("ingest", help="Läs in Omniglot-PNG till en cache")
    p.add_argument("--source", type=Path, required=True, help="Katalog med alfabet/tecken/*.png")
    p.add_argument("--out", type=Path, help="Cachefil")
    p.set_defaults(func=ingest_command)

    p = sub.add_parser("synth", help="Generera syntetiska tecken")
    p.add_argument("--classes", type=int, default=130)
    p.add_argument("--examples", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="Cachefil")
    p.set_defaults(func=synth_command)

    p = sub.add_parser("split", help="Dela klasser i tränings- och testmängd")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--n-train", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="Uppdelningsfil (JSON)")
    p.set_defaults(func=split_command)

    p = sub.add_parser("train", help="Träna Q-nätverket")
    _add_run_flags(p)
    p.add_argument("--params", type=Path, help="Återuppta från w.bin (adam.bin bredvid)")
    p.set_defaults(func=train_command)

    p = sub.add_parser("train-supervised", help="Träna den övervakade baslinjen")
    _add_run_flags(p)
    p.set_defaults(func=train_supervised_command)

    p = sub.add_parser("eval", help="Utvärdera girigt på testklasser")
    _add_run_flags(p, out_required=False)
    p.add_argument("--params", type=Path, required=True)
    p.set_defaults(func=eval_command)

    p = sub.add_parser("probe", help="Klassbytessond")
    _add_run_flags(p, out_required=False)
    p.add_argument("--params", type=Path, required=True)
    p.add_argument("--prefix", type=int, choices=[5, 10], required=True)
    p.add_argument("--episodes", type=int, default=1000)
    p.set_defaults(func=probe_command)

    p = sub.add_parser("sweep", help="Belöningssvep över R_inc")
    _add_run_flags(p)
    p.add_argument("--rinc", type=_rinc_list, required=True, help="T.ex. -1,-5,-10")
    p.add_argument("--supervised", action="store_true", help="Lägg till en övervakad baslinjerad")
    p.set_defaults(func=sweep_command)

    p = sub.add_parser("gradcheck", help="Jämför analytiska och numeriska gradienter")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=gradcheck_command)

    p = sub.add_parser("charts", help="Rita SVG-diagram från en körkatalog")
    p.add_argument("--out", type=Path, required=True, help="Körkatalog med CSV-filer")
    p.set_defaults(func=charts_command)
    return parser


def _fail(code: int, command: Optional[str], error: BaseException) -> int:
    print(f"[Fel]: {error}", file=sys.stderr)
    emit_event("command_failed", command=command, exit_code=code, error=str(error))
    return code


def run(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    command = None
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        command = args.command
        args.func(args)
        return EXIT_OK
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_OK
    except (UsageError, ValidationError) as e:
        return _fail(EXIT_USAGE, command, e)
    except (FormatError, SamplingError, IngestionError, DimensionError, ProtocolError, FileNotFoundError, KeyError) as e:
        return _fail(EXIT_DATA, command, e)
    except (NumericalAbort, GradientCheckFailed) as e:
        return _fail(EXIT_NUMERICAL, command, e)
    except ValueError as e:
        # Out-of-range arguments that only the domain code can judge (e.g. --n-train).
        return _fail(EXIT_USAGE, command, e)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
