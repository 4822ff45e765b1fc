"""Command-line pipeline: gen-data, pretrain, adapt, eval, ablate.

Every command reads the same flat ``key = value`` configuration and writes
into one run directory (``--out``), echoing the fully resolved configuration
to ``config.resolved`` so each artifact can be traced to its settings.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import backbone as bb
from .backbone import ABLATION_LAYER_SETS, BackboneConfig, LayerSet
from .errors import ConfigError, XSFaceError
from .metrics import (
    aggregate_folds,
    cross_modal_scores,
    export_embeddings,
    export_scores,
    retention_scores,
    verification_report,
)
from .synthdata import (
    BenchmarkConfig,
    IdentityDataset,
    ModalityParams,
    RenderConfig,
    benchmark_splits,
    build_pair_set,
    generate_benchmark,
    load_dataset,
    save_dataset,
)
from .trainer import AdaptConfig, PretrainConfig, adapt, format_train_log, pretrain

log = logging.getLogger(__name__)

COMMANDS = {
    "gen-data": "render the synthetic benchmark into <data_dir>",
    "pretrain": "train the backbone on source images of the pretraining identities -> pretrained.xsfc",
    "adapt": "adapt the pretrained model on cross-modal pairs -> adapted.xsfc, train.log",
    "eval": "score pretrained and adapted models (cross-modal and source retention) -> scores, embeddings, metrics",
    "ablate": "one-factor sweeps over layer sets, lambda and training fraction -> ablation.tsv",
}

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_INPUT = 4
EXIT_DATA = 5
EXIT_IO = 6

EXIT_CODES = {
    EXIT_OK: "success",
    EXIT_INTERNAL: "unexpected internal error",
    EXIT_USAGE: "usage error (unknown command or flag)",
    EXIT_CONFIG: "configuration error (unknown key, bad type or out-of-range value)",
    EXIT_MISSING_INPUT: "missing input file or directory",
    EXIT_DATA: "invalid or corrupt data, checkpoint or protocol violation",
    EXIT_IO: "cannot write an output artifact",
}

FLAGS = ("--config", "--seed", "--out")


# ---------------------------------------------------------------------------
# configuration schema
# ---------------------------------------------------------------------------

def _int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(x) for x in raw.split(","))


def _float_list(raw: str) -> tuple[float, ...]:
    return tuple(float(x) for x in raw.split(","))


def _layer_set_list(raw: str) -> tuple[LayerSet, ...]:
    return tuple(LayerSet.parse(x.strip()) for x in raw.split(";"))


def _names(raw: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in raw.split(",") if x.strip())


def _fmt(value: Any) -> str:
    if isinstance(value, tuple):
        sep = ";" if value and isinstance(value[0], LayerSet) else ","
        return sep.join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _between(lo, hi):
    return lambda v: lo <= v <= hi


def _positive(v) -> bool:
    return v > 0


def _non_negative(v) -> bool:
    return v >= 0


SWEEPS = ("layer_set", "lambda", "fraction")


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] = lambda v: True
    rule: str = ""


SCHEMA: dict[str, Key] = {
    # run
    "seed": Key(int, 0, _non_negative, ">= 0"),
    "data_dir": Key(str, ""),
    "pretrained": Key(str, ""),
    "adapted": Key(str, ""),
    # benchmark
    "bench_seed": Key(int, 7, _non_negative, ">= 0"),
    "num_identities": Key(int, 64, _positive, "> 0"),
    "variations": Key(int, 8, lambda v: v >= 2, ">= 2"),
    "pretrain_ids": Key(int, 48, _positive, "> 0"),
    "adapt_ids": Key(int, 8, lambda v: v >= 2, ">= 2"),
    "eval_ids": Key(int, 8, lambda v: v >= 2, ">= 2"),
    "input_size": Key(int, 32, lambda v: v > 0 and v % 8 == 0, "a positive multiple of 8"),
    "modality_gamma": Key(float, 0.45, _positive, "> 0"),
    "modality_fold": Key(float, 0.8, _between(0.0, 1.0), "in [0, 1]"),
    "modality_blur": Key(int, 3, lambda v: v >= 1 and v % 2 == 1, "an odd integer >= 1"),
    "neg_per_pos": Key(int, 3, _non_negative, ">= 0"),
    # backbone
    "stem_channels": Key(int, 16, _positive, "> 0"),
    "stage_channels": Key(_int_tuple, (16, 32, 48), lambda v: len(v) == 3 and min(v) > 0, "3 positive integers"),
    "stage_depths": Key(_int_tuple, (1, 1, 1), lambda v: len(v) == 3 and min(v) >= 0, "3 integers >= 0"),
    "s2_heads": Key(int, 2, _positive, "> 0"),
    "embed_dim": Key(int, 64, _positive, "> 0"),
    "mlp_ratio": Key(int, 2, _positive, "> 0"),
    # pretraining
    "pretrain_lr": Key(float, 1e-3, _positive, "> 0"),
    "pretrain_batch": Key(int, 64, _positive, "> 0"),
    "pretrain_epochs": Key(int, 30, _non_negative, ">= 0"),
    "pretrain_scale": Key(float, 16.0, _positive, "> 0"),
    # adaptation
    "layer_set": Key(LayerSet.parse, LayerSet.parse("LN,ST,S0")),
    "lambda": Key(float, 0.75, _between(0.0, 1.0), "in [0, 1]"),
    "margin": Key(float, 0.0, _between(0.0, 1.0), "in [0, 1]"),
    "lr": Key(float, 1e-4, _positive, "> 0"),
    "batch": Key(int, 64, _positive, "> 0"),
    "epochs": Key(int, 20, _non_negative, ">= 0"),
    # ablation grids
    "ablate_sweeps": Key(_names, SWEEPS, lambda v: len(v) > 0 and set(v) <= set(SWEEPS),
                         "a nonempty subset of " + ",".join(SWEEPS)),
    "ablate_layer_sets": Key(_layer_set_list, ABLATION_LAYER_SETS, lambda v: len(v) > 0, "nonempty"),
    "ablate_lambdas": Key(_float_list, (0.0, 0.25, 0.5, 0.75, 1.0),
                          lambda v: len(v) > 0 and all(0 <= x <= 1 for x in v), "values in [0, 1]"),
    "ablate_fractions": Key(_float_list, (1.0, 0.5, 0.2, 0.1, 0.05),
                            lambda v: len(v) > 0 and all(0 < x <= 1 for x in v), "values in (0, 1]"),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def replace(self, **changes) -> RunConfig:
        return RunConfig({**self.values, **changes})

    def resolved_text(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in SCHEMA)

    def benchmark(self) -> BenchmarkConfig:
        return BenchmarkConfig(
            num_identities=self["num_identities"], variations=self["variations"], seed=self["bench_seed"],
            pretrain_ids=self["pretrain_ids"], adapt_ids=self["adapt_ids"], eval_ids=self["eval_ids"],
            render=RenderConfig(input_size=self["input_size"]),
            modality=ModalityParams(self["modality_gamma"], self["modality_fold"], self["modality_blur"]))

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(input_size=self["input_size"], stem_channels=self["stem_channels"],
                              stage_channels=self["stage_channels"], stage_depths=self["stage_depths"],
                              s2_heads=self["s2_heads"], embed_dim=self["embed_dim"],
                              mlp_ratio=self["mlp_ratio"], seed=self["seed"])

    def pretrain(self) -> PretrainConfig:
        return PretrainConfig(self["pretrain_lr"], self["pretrain_batch"], self["pretrain_epochs"], self["seed"],
                              self["pretrain_scale"])

    def adapt(self) -> AdaptConfig:
        return AdaptConfig(self["layer_set"], self["lambda"], self["margin"], self["lr"], self["batch"],
                           self["epochs"], self["seed"])


def parse_config_text(text: str) -> RunConfig:
    values = {k: entry.default for k, entry in SCHEMA.items()}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError("unknown key", key=key, line=lineno)
        if key in seen:
            raise ConfigError(f"duplicate key (first set on line {seen[key]})", key=key, line=lineno)
        seen[key] = lineno
        entry = SCHEMA[key]
        try:
            parsed = entry.parse(value)
        except (ValueError, XSFaceError) as exc:
            raise ConfigError(f"cannot parse {value!r}: {exc}", key=key, line=lineno) from exc
        if not entry.check(parsed):
            raise ConfigError(f"value {value!r} must be {entry.rule}", key=key, line=lineno)
        values[key] = parsed
    cfg = RunConfig(values)
    _check_cross_fields(cfg, seen)
    return cfg


def _check_cross_fields(cfg: RunConfig, lines: dict[str, int]) -> None:
    used = cfg["pretrain_ids"] + cfg["adapt_ids"] + cfg["eval_ids"]
    if used > cfg["num_identities"]:
        raise ConfigError(f"pretrain_ids + adapt_ids + eval_ids = {used} exceeds {cfg['num_identities']}",
                          key="num_identities", line=lines.get("num_identities"))
    if cfg["stage_channels"][2] % cfg["s2_heads"]:
        raise ConfigError(f"S2 width {cfg['stage_channels'][2]} not divisible by {cfg['s2_heads']} heads",
                          key="s2_heads", line=lines.get("s2_heads"))


def parse_config(path) -> RunConfig:
    """Read and validate a ``key = value`` file; absent keys take their defaults."""
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

@dataclass
class Run:
    cfg: RunConfig
    out: Path

    def path(self, key: str, default_name: str) -> Path:
        return Path(self.cfg[key]) if self.cfg[key] else self.out / default_name

    @property
    def data_dir(self) -> Path:
        return self.path("data_dir", "data")

    def require(self, path: Path) -> Path:
        if not path.exists():
            raise FileNotFoundError(f"missing input: {path}")
        return path

    def dataset(self) -> IdentityDataset:
        return load_dataset(self.require(self.data_dir))

    def splits(self):
        return benchmark_splits(self.cfg.benchmark())

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(text, encoding="utf-8")
        return path


def cmd_gen_data(run: Run) -> None:
    dataset = generate_benchmark(run.cfg.benchmark())
    save_dataset(dataset, run.data_dir)
    log.info("wrote %d images to %s", len(dataset), run.data_dir)


def cmd_pretrain(run: Run) -> None:
    dataset = run.dataset()
    pre_ids, _, _ = run.splits()
    history: list[float] = []
    model = pretrain(bb.build_backbone(run.cfg.backbone()), dataset, pre_ids, run.cfg.pretrain(), history)
    bb.save_checkpoint(model, run.path("pretrained", "pretrained.xsfc"))
    run.write("pretrain.log", "".join(f"{e + 1}\t{loss:.6f}\n" for e, loss in enumerate(history)))


def _adapt_once(run: Run, dataset: IdentityDataset, pretrained: bb.Model, cfg: AdaptConfig, ids, history=None):
    student = pretrained.copy()
    bb.partition_parameters(student, cfg.layer_set)
    teacher = bb.clone_teacher(pretrained)
    pairs = build_pair_set(dataset, ids, run.cfg["neg_per_pos"], run.cfg["seed"])
    return adapt(student, teacher, pairs, dataset, cfg, history)


def cmd_adapt(run: Run) -> None:
    dataset = run.dataset()
    pretrained = bb.load_checkpoint(run.require(run.path("pretrained", "pretrained.xsfc")))
    _, adapt_ids, _ = run.splits()
    history = []
    model = _adapt_once(run, dataset, pretrained, run.cfg.adapt(), adapt_ids, history)
    bb.save_checkpoint(model, run.path("adapted", "adapted.xsfc"))
    run.write("train.log", "epoch\tbatch\tl_c\tl_sdl\tl_total\n" + format_train_log(history))


def _evaluate(model: bb.Model, dataset: IdentityDataset, ids) -> dict[str, dict[str, float]]:
    return {"cross": verification_report(cross_modal_scores(model, dataset, ids)).as_dict(),
            "retention": verification_report(retention_scores(model, dataset, ids)).as_dict()}


def cmd_eval(run: Run) -> None:
    dataset = run.dataset()
    _, _, eval_ids = run.splits()
    # load everything first so a missing input leaves no partial outputs
    models = {tag: bb.load_checkpoint(run.require(run.path(tag, f"{tag}.xsfc"))) for tag in ("pretrained", "adapted")}
    tsv, report = ["metric\tmean\tstd\n"], []
    for tag, model in models.items():
        for protocol, scorer in (("cross", cross_modal_scores), ("retention", retention_scores)):
            scores = scorer(model, dataset, eval_ids)
            export_scores(scores, run.out / f"scores_{tag}_{protocol}.csv")
            folds = aggregate_folds([verification_report(scores)])
            tsv.append(folds.to_tsv(prefix=f"{tag}.{protocol}."))
            report.append(folds.to_text(prefix=f"{tag}.{protocol}."))
        entries = [dataset.entries[i] for i in dataset.select(eval_ids)]
        export_embeddings(entries, model, run.out / f"embeddings_{tag}.xst")
    run.write("metrics.tsv", "".join(tsv))
    run.write("report.txt", "".join(report))


def fraction_ids(ids, fraction: float, seed: int) -> list[int]:
    """A seeded subset of ``round(fraction * len(ids))`` identities, never fewer than 2."""
    ids = sorted(ids)
    n = min(len(ids), max(2, int(round(fraction * len(ids)))))
    order = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xF4]))).permutation(len(ids))
    return sorted(ids[i] for i in order[:n])


def ablation_cells(cfg: RunConfig) -> list[tuple[str, str, AdaptConfig, float]]:
    """(sweep, value, adapt config, training fraction) per cell; each sweep varies one factor from the defaults."""
    base = cfg.adapt()
    cells = []
    for sweep in cfg["ablate_sweeps"]:
        if sweep == "layer_set":
            for ls in cfg["ablate_layer_sets"]:
                cells.append((sweep, str(ls), AdaptConfig(ls, base.lam, base.margin, base.lr, base.batch,
                                                          base.epochs, base.seed), 1.0))
        elif sweep == "lambda":
            for lam in cfg["ablate_lambdas"]:
                cells.append((sweep, _fmt(lam), AdaptConfig(base.layer_set, lam, base.margin, base.lr, base.batch,
                                                            base.epochs, base.seed), 1.0))
        else:
            for frac in cfg["ablate_fractions"]:
                cells.append((sweep, _fmt(frac), base, frac))
    return cells


ABLATION_METRICS = ("auc", "eer", "rank1", "vr@far=0.01")


def cmd_ablate(run: Run) -> None:
    dataset = run.dataset()
    pretrained = bb.load_checkpoint(run.require(run.path("pretrained", "pretrained.xsfc")))
    _, adapt_ids, eval_ids = run.splits()
    header = ["sweep", "value", "identities"] + [f"{p}.{m}" for p in ("cross", "retention") for m in ABLATION_METRICS]
    rows = ["\t".join(header) + "\n"]
    for sweep, value, cfg, frac in ablation_cells(run.cfg):
        ids = fraction_ids(adapt_ids, frac, run.cfg["seed"])
        log.info("ablate %s=%s on %d identities", sweep, value, len(ids))
        metrics = _evaluate(_adapt_once(run, dataset, pretrained, cfg, ids), dataset, eval_ids)
        cols = [f"{metrics[p][m]:.6f}" for p in ("cross", "retention") for m in ABLATION_METRICS]
        rows.append("\t".join([sweep, value, str(len(ids))] + cols) + "\n")
    run.write("ablation.tsv", "".join(rows))


HANDLERS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "adapt": cmd_adapt, "eval": cmd_eval,
            "ablate": cmd_ablate}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def help_epilog() -> str:
    lines = ["commands:"]
    lines += [f"  {name:<10} {text}" for name, text in COMMANDS.items()]
    lines.append("exit codes:")
    lines += [f"  {code}  {text}" for code, text in EXIT_CODES.items()]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xsface", description="Cross-spectral adaptation pipeline on a synthetic benchmark.",
                     epilog=help_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", choices=list(COMMANDS), metavar="command", help="one of: " + ", ".join(COMMANDS))
    parser.add_argument("--config", required=True,
                        help="key = value configuration file; absent keys take defaults, so an empty file is valid")
    parser.add_argument("--seed", type=int, help="override the config 'seed' key")
    parser.add_argument("--out", default="run", help="run directory (default: ./run)")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING_INPUT
    if isinstance(exc, XSFaceError):
        return EXIT_DATA
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_INTERNAL


def run_command(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if not Path(args.config).is_file():
            raise FileNotFoundError(f"missing config file: {args.config}")
        cfg = parse_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be >= 0", key="seed")
            cfg = cfg.replace(seed=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        run = Run(cfg, out)
        run.write("config.resolved", cfg.resolved_text())
        HANDLERS[args.command](run)
    except Exception as exc:  # one line on stderr, distinct exit code per failure class
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"xsface {args.command}: {message}", file=sys.stderr)
        return _exit_code(exc)
    return EXIT_OK


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    raise SystemExit(run_command())


if __name__ == "__main__":
    main()
