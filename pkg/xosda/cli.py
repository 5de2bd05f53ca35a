"""
`xosda` command line.

    xosda synth    --config run.json --out data/
    xosda pretrain data/source.csv --config run.json --out runs/
    xosda adapt    runs/source.ckpt data/target.csv --config run.json --out runs/
    xosda eval     runs/adapted.ckpt data/target.csv --config run.json
    xosda sweep    combiner --config run.json --out sweeps/

The config file is one JSON object of `RunSettings` keys, plus an optional `"synth"` object
of `SynthSettings` keys. `--seed` and `--set key=value` override it (`--set synth.key=value`
for the synthetic data); `XOSDA_<KEY>` environment variables sit between the two.

Exit codes: 0 ok, 1 for a config or data error, 2 for a numerical failure.
"""
import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .config import Combiner, ContrastiveLoss, RunSettings, SynthSettings, WeightFn
from .data import SplitRole, generate_synthetic, load_features, write_features
from .errors import ConfigError, DataError, NumericalError, XosdaError
from .evaluation import discovery_metrics, metrics_to_dict, open_set_metrics
from .model import load_checkpoint, save_checkpoint
from .pipeline import run_adaptation, train_source_model
from .retrievers import EnvVarRetriever, JsonFileRetriever, OverridesRetriever

log = logging.getLogger(__name__)

SYNTH_SECTION = "synth"
SWEEP_AXES = ("F_assignment", "combiner", "n_private", "components", "contrastive")


def _split_overrides(pairs: Sequence[str]) -> Tuple[List[str], List[str]]:
    run, synth = [], []
    prefix = f"{SYNTH_SECTION}."
    for pair in pairs:
        if pair.startswith(prefix):
            synth.append(pair[len(prefix):])
        else:
            run.append(pair)
    return run, synth


def load_settings(args) -> Tuple[RunSettings, SynthSettings]:
    """ Settings for one command: `--set`/`--seed`, then env-vars, then the config file, then defaults. """
    run_pairs, synth_pairs = _split_overrides(args.set or [])
    run_retrievers = [OverridesRetriever(run_pairs, settings_class=RunSettings), EnvVarRetriever()]
    synth_retrievers = [OverridesRetriever(synth_pairs, settings_class=SynthSettings)]
    if args.config:
        config = JsonFileRetriever(args.config, settings_class=RunSettings, sections=[SYNTH_SECTION])
        run_retrievers.append(config)
        synth_retrievers.append(config.section(SYNTH_SECTION, settings_class=SynthSettings))

    run = RunSettings(retrievers=run_retrievers)
    synth = SynthSettings(retrievers=synth_retrievers)
    if args.seed is not None:
        run.seed = args.seed
        synth.seed = args.seed
    return run.settings__validate(), synth.settings__validate()


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, value) -> Path:
    path.write_text(json.dumps(value, indent=2, sort_keys=True) + "\n")
    log.info("Wrote (%s)", path)
    return path


def _load_model(path, settings: RunSettings, input_dim: int = None):
    return load_checkpoint(
        path,
        input_dim=input_dim,
        hidden_widths=settings.hidden_widths,
        feature_dim=settings.feature_dim,
    )


def cmd_synth(args, settings: RunSettings, synth: SynthSettings) -> int:
    out = _out_dir(args)
    source, target = generate_synthetic(synth)
    write_features(source, out / "source.csv")
    write_features(target, out / "target.csv")
    _write_json(out / "synth.json", {SYNTH_SECTION: synth.settings__snapshot()})
    return 0


def cmd_pretrain(args, settings: RunSettings, synth: SynthSettings) -> int:
    out = _out_dir(args)
    source = load_features(args.source, role=SplitRole.SOURCE)
    if not source.n_samples:
        raise DataError(f"Source features ({args.source}) hold no sample.")
    model = train_source_model(source, settings)
    save_checkpoint(model, out / "source.ckpt")
    return 0


def cmd_adapt(args, settings: RunSettings, synth: SynthSettings) -> int:
    out = _out_dir(args)
    model = _load_model(args.checkpoint, settings)
    target = load_features(
        args.target,
        role=SplitRole.TARGET,
        n_shared=model.classifier.n_shared,
        input_dim=model.extractor.input_dim,
    )
    truth = target.labels if target.has_labels else None
    result = run_adaptation(model, target.unlabelled(), truth=truth, settings=settings)
    save_checkpoint(result.model, out / "adapted.ckpt")
    _write_json(out / "report.json", result.report.to_dict())
    return 0


def cmd_eval(args, settings: RunSettings, synth: SynthSettings) -> int:
    model = _load_model(args.checkpoint, settings)
    n_shared = model.classifier.n_shared
    target = load_features(
        args.target, role=SplitRole.TARGET, n_shared=n_shared, input_dim=model.extractor.input_dim
    )
    if not target.has_labels:
        raise DataError(f"Evaluating needs ground-truth labels for every row of ({args.target}).")

    result = model.forward(target.inputs)
    predictions = result.p.argmax(axis=1)
    open_set = open_set_metrics(predictions, target.labels, n_shared)
    discovery = None
    if model.classifier.n_private == target.n_private:
        discovery = discovery_metrics(
            predictions, target.labels, n_shared, model.classifier.n_private,
            n_true_private=target.n_private,
            mode=settings.discovery_matching,
            features=result.z,
        )
    metrics = metrics_to_dict(open_set, discovery)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    if args.out:
        _write_json(_out_dir(args) / "metrics.json", metrics)
    return 0


def sweep_cells(axis: str, n_shared: int) -> List[Tuple[str, Dict]]:
    """ `(label, RunSettings overrides)` for every value of a sweep axis. """
    if axis == "F_assignment":
        pairs = [
            (WeightFn.LINEAR, WeightFn.LINEAR),
            (WeightFn.LINEAR, WeightFn.EXPONENTIAL),
            (WeightFn.EXPONENTIAL, WeightFn.EXPONENTIAL),
            (WeightFn.EXPONENTIAL, WeightFn.LINEAR),
        ]
        short = {WeightFn.LINEAR: "lin", WeightFn.EXPONENTIAL: "exp"}
        return [(f"{short[nc]}/{short[cs]}", dict(weight_nc=nc, weight_cs=cs)) for nc, cs in pairs]
    if axis == "combiner":
        return [(c.value, dict(combiner=c)) for c in (Combiner.AND, Combiner.OR)]
    if axis == "n_private":
        values = sorted({1, max(n_shared // 2, 1), n_shared, 2 * n_shared})
        return [(str(v), dict(n_private=v)) for v in values]
    if axis == "components":
        base = dict(cluster_init=False, use_nc_uncertainty=False, use_cs_uncertainty=False, gamma_ctr=0.0)
        steps = [
            ("baseline", {}),
            ("+cluster_init", dict(cluster_init=True)),
            ("+nc", dict(use_nc_uncertainty=True)),
            ("+cs", dict(use_cs_uncertainty=True)),
            ("+nl_infonce", dict(gamma_ctr=1.0)),
        ]
        cells, current = [], dict(base)
        for label, change in steps:
            current = {**current, **change}
            cells.append((label, dict(current)))
        return cells
    if axis == "contrastive":
        return [(c.value, dict(contrastive_loss=c)) for c in ContrastiveLoss]
    raise ConfigError(f"Unknown sweep axis ({axis}); expected one of {', '.join(SWEEP_AXES)}.")


SWEEP_CSV_FIELDS = [
    "axis", "value", "n_seeds",
    "hos_mean", "hos_std", "os_star_mean", "unk_mean", "cluster_acc_mean",
]


def run_sweep(axis: str, settings: RunSettings, synth: SynthSettings) -> List[Dict]:
    """
    Adapts once per (axis value, seed) on the synthetic benchmark and aggregates the metrics.

    Seeds run from `settings.seed` to `settings.seed + sweep_seeds - 1`; every seed pretrains
    its own source model, shared by all axis values.
    """
    cells = sweep_cells(axis, synth.n_shared)
    source, target = generate_synthetic(synth)
    results: Dict[str, List[Dict]] = {label: [] for label, _ in cells}
    seeds = range(settings.seed, settings.seed + settings.sweep_seeds)

    base = settings.settings__snapshot()
    for seed in seeds:
        source_model = train_source_model(source, RunSettings(**{**base, "seed": seed}))
        for label, overrides in cells:
            log.info("Sweep %s=%s, seed %s", axis, label, seed)
            cell_settings = RunSettings(**{**base, "seed": seed, **overrides})
            report = run_adaptation(
                source_model, target.unlabelled(), truth=target.labels, settings=cell_settings
            ).report
            results[label].append(metrics_to_dict(report.metrics, report.discovery))

    rows = []
    for label, _ in cells:
        runs = results[label]
        cluster = [r["cluster_acc"] for r in runs if r["cluster_acc"] is not None]
        rows.append({
            "axis": axis,
            "value": label,
            "n_seeds": len(runs),
            "hos_mean": float(np.mean([r["hos"] for r in runs])),
            "hos_std": float(np.std([r["hos"] for r in runs])),
            "os_star_mean": float(np.mean([r["os_star"] for r in runs])),
            "unk_mean": float(np.mean([r["unk"] for r in runs])),
            "cluster_acc_mean": float(np.mean(cluster)) if cluster else None,
        })
    return rows


def cmd_sweep(args, settings: RunSettings, synth: SynthSettings) -> int:
    rows = run_sweep(args.axis, settings, synth)
    path = _out_dir(args) / f"sweep_{args.axis}.csv"
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SWEEP_CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if v is None else v for k, v in row.items()})
    log.info("Wrote (%s)", path)
    return 0


class ArgumentParser(argparse.ArgumentParser):
    """ Usage mistakes are configuration errors (exit code 1), not argparse's exit code 2. """

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file.")
    common.add_argument("--seed", type=int, help="Overrides the `seed` setting.")
    common.add_argument("--out", type=Path, help="Output directory.")
    common.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="Override one setting; repeatable. Prefix with `synth.` for synthetic-data settings.",
    )
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")

    parser = ArgumentParser(
        prog="xosda", description="Source-free open-set domain adaptation at desk scale."
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", parents=[common], help="Write a synthetic benchmark.")
    synth.set_defaults(handler=cmd_synth)

    pretrain = commands.add_parser("pretrain", parents=[common], help="Train the source model.")
    pretrain.add_argument("source", type=Path, help="Labelled source feature CSV.")
    pretrain.set_defaults(handler=cmd_pretrain)

    adapt = commands.add_parser("adapt", parents=[common], help="Adapt a source model to a target.")
    adapt.add_argument("checkpoint", type=Path, help="Source model checkpoint.")
    adapt.add_argument("target", type=Path, help="Target feature CSV.")
    adapt.set_defaults(handler=cmd_adapt)

    evaluate = commands.add_parser("eval", parents=[common], help="Score a model on a labelled target.")
    evaluate.add_argument("checkpoint", type=Path)
    evaluate.add_argument("target", type=Path)
    evaluate.set_defaults(handler=cmd_eval)

    sweep = commands.add_parser("sweep", parents=[common], help="Run an ablation sweep.")
    sweep.add_argument("axis", help=f"One of: {', '.join(SWEEP_AXES)}.")
    sweep.set_defaults(handler=cmd_sweep)
    return parser


def main(argv: Sequence[str] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        log.error("%s", e)
        return 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        settings, synth = load_settings(args)
        with settings, synth:
            return args.handler(args, settings, synth)
    except NumericalError as e:
        log.error("Numerical failure: %s", e)
        return 2
    except XosdaError as e:
        log.error("%s", e)
        return 1
    except OSError as e:
        log.error("I/O failure: %s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
