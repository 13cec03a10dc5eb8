"""Experiment harness: run federations, attack them, account bits.

Subcommands:

``run``             execute a federation from a config file, persisting a
                    config snapshot, master seed, per-round metrics CSV, an
                    attack bundle, and optionally a line-oriented transcript
                    dump.
``attack``          load one or two completed run directories and report
                    source-inference accuracy (a two-run invocation emits
                    the standard-vs-defended comparison table).
``budget``          print the per-client per-round bit budget.
``loss-curve``      merge per-round losses of several runs into one CSV for
                    external plotting.
``partition-stats`` summarize the heterogeneity of a partition.

Configs are INI files; unknown sections or keys are errors. Command-line
flags override individual values; environment variables never do.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import codec, data, federation, nn


class ConfigError(ValueError):
    """Invalid experiment configuration; message names file, key, and line."""


@dataclass(frozen=True)
class ExperimentConfig:
    # [run]
    mode: str = "standard"
    rounds: int = 15
    clients: int = 10
    cohort: int = 10
    seed: int = 1
    # [model]
    layers: tuple[int, ...] = (784, 32, 10)
    activation: str = "relu"
    # [train]
    lr: float = 0.2
    epochs: int = 2
    batch: int = 32
    # [codec]
    k: int = 3
    r: int = 1000
    encoder: str = "general"
    u_channel: str = "auto"
    # [data]
    source: str = "digits"
    data_dir: str = "data"
    subset: int = 10000
    test_subset: int = 2000
    alpha: float = 0.1
    partition_seed: int = -1  # -1: use the master seed
    digits_seed: int = 7
    gaussian_n_per_class: int = 200
    gaussian_classes: int = 4
    gaussian_dim: int = 16
    gaussian_noise: float = 0.15
    # [output]
    out_dir: str = "runs/out"
    dump_transcript: bool = False
    # [attack]
    targets_per_client: int = 50
    pairing_budget: int = 4096
    attack_round: str = "final"
    attack_seed: int = -1  # -1: use the master seed

    def effective_partition_seed(self) -> int:
        return self.seed if self.partition_seed < 0 else self.partition_seed

    def effective_attack_seed(self) -> int:
        return self.seed if self.attack_seed < 0 else self.attack_seed


_SCHEMA: dict[str, dict[str, str]] = {
    "run": {"mode": "mode", "rounds": "rounds", "clients": "clients", "cohort": "cohort", "seed": "seed"},
    "model": {"layers": "layers", "activation": "activation"},
    "train": {"lr": "lr", "epochs": "epochs", "batch": "batch"},
    "codec": {"k": "k", "r": "r", "encoder": "encoder", "u_channel": "u_channel"},
    "data": {
        "source": "source",
        "data_dir": "data_dir",
        "subset": "subset",
        "test_subset": "test_subset",
        "alpha": "alpha",
        "partition_seed": "partition_seed",
        "digits_seed": "digits_seed",
        "gaussian_n_per_class": "gaussian_n_per_class",
        "gaussian_classes": "gaussian_classes",
        "gaussian_dim": "gaussian_dim",
        "gaussian_noise": "gaussian_noise",
    },
    "output": {"out_dir": "out_dir", "dump_transcript": "dump_transcript"},
    "attack": {
        "targets_per_client": "targets_per_client",
        "pairing_budget": "pairing_budget",
        "attack_round": "attack_round",
        "attack_seed": "attack_seed",
    },
}

_FIELD_SECTION = {
    field_name: section for section, keys in _SCHEMA.items() for field_name in keys.values()
}


def _find_line(text: str, token: str) -> int | None:
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith(f"[{token}]") or stripped.split("=")[0].strip() == token:
            return lineno
    return None


def _coerce(field_type, raw: str, where: str):
    raw = raw.strip()
    try:
        if field_type is bool:
            lowered = raw.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if field_type is int:
            return int(raw)
        if field_type is float:
            return float(raw)
        if field_type is str:
            return raw
        # tuple of ints (layer sizes)
        return tuple(int(part) for part in raw.replace(" ", "").split(",") if part)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate an experiment config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc

    defaults = ExperimentConfig()
    resolved_types = {
        f.name: tuple if f.name == "layers" else type(getattr(defaults, f.name))
        for f in fields(ExperimentConfig)
    }
    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            line = _find_line(text, section)
            raise ConfigError(
                f"{path}:{line}: unknown section [{section}]"
            )
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                line = _find_line(text, key)
                raise ConfigError(
                    f"{path}:{line}: unknown key {key!r} in section [{section}]"
                )
            field_name = _SCHEMA[section][key]
            where = f"{path}:{_find_line(text, key)}: key {key!r}"
            values[field_name] = _coerce(resolved_types[field_name], raw, where)
    cfg = ExperimentConfig(**values)
    validate_config(cfg, str(path))
    return cfg


def validate_config(cfg: ExperimentConfig, where: str = "config") -> None:
    problems = []
    if cfg.mode not in federation.MODES:
        problems.append(f"mode must be one of {federation.MODES}, got {cfg.mode!r}")
    if cfg.source not in ("mnist", "digits", "gaussian"):
        problems.append(f"source must be mnist, digits, or gaussian, got {cfg.source!r}")
    if cfg.rounds < 0:
        problems.append(f"rounds must be >= 0, got {cfg.rounds}")
    if not (1 <= cfg.cohort <= cfg.clients):
        problems.append(f"cohort {cfg.cohort} must be in 1..clients={cfg.clients}")
    if not (1 <= cfg.k <= 9):
        problems.append(f"k={cfg.k} outside 1..9")
    if cfg.r < 1:
        problems.append(f"r={cfg.r} must be >= 1")
    if len(cfg.layers) < 2:
        problems.append(f"layers needs >= 2 entries, got {cfg.layers}")
    if cfg.attack_round != "final":
        try:
            int(cfg.attack_round)
        except ValueError:
            problems.append(f"attack_round must be 'final' or an integer, got {cfg.attack_round!r}")
    if problems:
        raise ConfigError(f"{where}: " + "; ".join(problems))


def config_to_ini(cfg: ExperimentConfig) -> str:
    """Render the effective config back to canonical INI text."""
    parser = configparser.ConfigParser()
    for section, keys in _SCHEMA.items():
        parser[section] = {}
        for key, field_name in keys.items():
            value = getattr(cfg, field_name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            parser[section][key] = str(value)
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def load_dataset(cfg: ExperimentConfig) -> tuple[data.Dataset, data.Dataset]:
    """Materialize train/test sets per the config's data section."""
    if cfg.source == "mnist":
        train, test = data.load_mnist_dir(cfg.data_dir)
        return train.subset(cfg.subset), test.subset(cfg.test_subset)
    if cfg.source == "digits":
        paths = data.ensure_digit_corpus(cfg.data_dir, cfg.subset, cfg.test_subset, cfg.digits_seed)
        return data.load_idx(paths[0], paths[1]), data.load_idx(paths[2], paths[3])
    full = data.synthetic_gaussian(
        cfg.gaussian_n_per_class,
        cfg.gaussian_classes,
        cfg.gaussian_dim,
        seed=cfg.digits_seed,
        noise=cfg.gaussian_noise,
    )
    n_train = (len(full) * 5) // 6
    train = data.Dataset(full.features[:n_train], full.labels[:n_train], full.n_classes)
    test = data.Dataset(full.features[n_train:], full.labels[n_train:], full.n_classes)
    return train.subset(cfg.subset), test.subset(cfg.test_subset)


def build_partition(cfg: ExperimentConfig, train: data.Dataset) -> list[data.ClientDataset]:
    spec = data.PartitionSpec(
        n_clients=cfg.clients, alpha=cfg.alpha, seed=cfg.effective_partition_seed()
    )
    return data.dirichlet_partition(train, spec)


def to_fl_config(cfg: ExperimentConfig) -> federation.FLConfig:
    if cfg.layers[-1] < 2:
        raise ConfigError("output layer needs at least 2 classes")
    return federation.FLConfig(
        rounds=cfg.rounds,
        n_clients=cfg.clients,
        cohort=cfg.cohort,
        k=cfg.k,
        r=cfg.r,
        lr=cfg.lr,
        epochs=cfg.epochs,
        batch_size=cfg.batch,
        mode=cfg.mode,
        seed=cfg.seed,
        model=nn.ModelConfig(layer_sizes=cfg.layers, activation=cfg.activation, seed=cfg.seed),
        encoder_mode=cfg.encoder,
        u_channel=cfg.u_channel,
    )


METRICS_COLUMNS = ("round", "mode", "train_loss", "test_loss", "test_acc", "u_bits", "h_bits")


def write_metrics_csv(path: Path, rows: list[federation.RoundMetrics]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for m in rows:
            writer.writerow(
                [
                    m.round_index,
                    m.mode,
                    repr(m.train_loss),
                    repr(m.test_loss),
                    repr(m.test_acc),
                    m.u_bits,
                    m.h_bits,
                ]
            )


def _write_attack_bundle(path: Path, result: federation.RunResult, cfg: ExperimentConfig) -> None:
    record = result.records[-1]
    transcript = record.transcript
    arrays = {
        "mode": np.array(transcript.mode),
        "round_index": np.array(transcript.round_index),
        "cohort": np.array(transcript.cohort, dtype=np.int64),
        "seed": np.array(cfg.seed),
        "layers": np.array(result.cfg.model.layer_sizes, dtype=np.int64),
        "activation": np.array(result.cfg.model.activation),
        "global_before": transcript.global_before.values,
        "global_after": transcript.global_after.values,
        "client_index_offsets": np.cumsum(
            [0] + [len(c.indices) for c in result.partition]
        ).astype(np.int64),
        "client_indices": np.concatenate([c.indices for c in result.partition]),
    }
    if transcript.mode == "standard":
        arrays["per_client_updates"] = np.stack(
            [u.values for u in transcript.per_client_updates]
        )
    else:
        arrays["h_param_ids"] = transcript.h_channel.param_ids
        arrays["h_values"] = transcript.h_channel.values
        arrays["gt_endpoints"] = np.array(record.ground_truth.endpoints, dtype=np.float64)
    np.savez(path, **arrays)


def _dump_transcript(path: Path, transcript: federation.RoundTranscript) -> None:
    """One message per line: channel, param_id, value."""
    u, h = transcript.u_channel, transcript.h_channel
    if isinstance(u, federation.UnaryCounts):
        total = len(u)
        if total > 5_000_000:
            raise ConfigError(
                f"transcript dump would emit {total} unary lines; rerun with "
                "u_channel=explicit on a smaller configuration"
            )
        n_params = u.ones.shape[0]
        per_param = u.codes_per_param * u.r
        with open(path, "w") as f:
            for pid in range(n_params):
                ones = int(u.ones[pid])
                for _ in range(ones):
                    f.write(f"u,{pid},1\n")
                for _ in range(per_param - ones):
                    f.write(f"u,{pid},0\n")
            for i in range(len(h)):
                f.write(f"h,{int(h.param_ids[i])},{float(h.values[i])!r}\n")
        return
    with open(path, "w") as f:
        for i in range(len(u)):
            f.write(f"u,{int(u.param_ids[i])},{int(u.bits[i])}\n")
        for i in range(len(h)):
            f.write(f"h,{int(h.param_ids[i])},{float(h.values[i])!r}\n")


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    train, test = load_dataset(cfg)
    if cfg.layers[0] != train.features.shape[1]:
        raise ConfigError(
            f"input layer {cfg.layers[0]} does not match feature dimension "
            f"{train.features.shape[1]} of source {cfg.source!r}"
        )
    partition = build_partition(cfg, train)
    fl_cfg = to_fl_config(cfg)
    result = federation.run_rounds(fl_cfg, partition, (test.features, test.labels))

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source_text = Path(args.config).read_text() if args.config else config_to_ini(cfg)
    (out / "config.ini").write_text(source_text)
    (out / "config_effective.ini").write_text(config_to_ini(cfg))
    (out / "master_seed.txt").write_text(f"{cfg.seed}\n")
    write_metrics_csv(out / "metrics.csv", result.metrics_rows())
    if result.records:
        _write_attack_bundle(out / "attack_bundle.npz", result, cfg)
        if cfg.dump_transcript and cfg.mode == "unary_quant":
            _dump_transcript(out / "transcript.txt", result.records[-1].transcript)
    print(f"run complete: {cfg.mode}, {cfg.rounds} rounds -> {out}")
    if result.records:
        final = result.final_record.metrics
        print(
            f"final test accuracy {final.test_acc:.4f}, test loss {final.test_loss:.4f}"
        )
    return 0


def _load_run_dir(run_dir: Path):
    """Rebuild the attackable pieces of a persisted run."""
    bundle_path = run_dir / "attack_bundle.npz"
    config_path = run_dir / "config_effective.ini"
    if not config_path.exists():
        raise ConfigError(f"{run_dir}: missing config_effective.ini; not a run directory")
    if not bundle_path.exists():
        raise ConfigError(f"{run_dir}: missing attack_bundle.npz; run had no rounds?")
    cfg = load_config(config_path)
    bundle = np.load(bundle_path)
    train, _ = load_dataset(cfg)

    offsets = bundle["client_index_offsets"]
    all_indices = bundle["client_indices"]
    partition = []
    for c in range(len(offsets) - 1):
        ix = all_indices[offsets[c] : offsets[c + 1]]
        labels = train.labels[ix]
        partition.append(
            data.ClientDataset(
                features=train.features[ix],
                labels=labels,
                class_histogram=np.bincount(labels, minlength=train.n_classes),
                indices=ix,
                n_classes=train.n_classes,
            )
        )

    layout = nn.ModelLayout.for_config(
        nn.ModelConfig(
            layer_sizes=tuple(int(v) for v in bundle["layers"]),
            activation=str(bundle["activation"]),
            seed=cfg.seed,
        )
    )
    mode = str(bundle["mode"])
    cohort = tuple(int(c) for c in bundle["cohort"])
    common = dict(
        mode=mode,
        round_index=int(bundle["round_index"]),
        cohort=cohort,
        global_before=nn.ParamVector(values=bundle["global_before"], layout=layout),
    )
    if mode == "standard":
        transcript = federation.RoundTranscript(
            per_client_updates=[
                nn.ParamVector(values=row, layout=layout)
                for row in bundle["per_client_updates"]
            ],
            **common,
        )
        ground_truth = None
    else:
        transcript = federation.RoundTranscript(
            u_channel=None,
            h_channel=federation.QuantChannel(
                param_ids=bundle["h_param_ids"], values=bundle["h_values"]
            ),
            **common,
        )
        ground_truth = federation.RoundGroundTruth(
            cohort=cohort,
            endpoints=tuple((float(a), float(b)) for a, b in bundle["gt_endpoints"]),
        )
    transcript.global_after = nn.ParamVector(values=bundle["global_after"], layout=layout)
    with open(run_dir / "metrics.csv", newline="") as f:
        metrics_rows = list(csv.DictReader(f))
    final_acc = float(metrics_rows[-1]["test_acc"]) if metrics_rows else float("nan")
    return cfg, transcript, ground_truth, partition, final_acc


def _attack_one(cfg, transcript, ground_truth, partition, rng_seed, targets):
    if transcript.mode == "standard":
        return attack_mod.sia_loss_based(transcript, targets)
    return attack_mod.sia_on_unary_quant(
        transcript,
        targets,
        ground_truth=ground_truth,
        pairing_budget=cfg.pairing_budget,
        rng=np.random.default_rng(rng_seed + 1),
    )


def write_attack_report_csv(path: Path, reports: list[attack_mod.AttackReport]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["mode", "n_targets", "correct", "accuracy", "random_baseline"])
        for rep in reports:
            writer.writerow(
                [rep.mode, rep.n_targets, rep.correct, repr(rep.accuracy), repr(rep.random_baseline)]
            )


def cmd_attack(args: argparse.Namespace) -> int:
    run_dirs = [Path(d) for d in args.run_dir]
    loaded = [_load_run_dir(d) for d in run_dirs]

    cfg0 = loaded[0][0]
    seed = args.seed if args.seed is not None else cfg0.effective_attack_seed()
    per_client = args.targets_per_client or cfg0.targets_per_client
    rng = np.random.default_rng(seed)
    targets = attack_mod.draw_targets(loaded[0][3], per_client, rng)

    reports = []
    for (cfg, transcript, ground_truth, partition, _), run_dir in zip(loaded, run_dirs):
        report = _attack_one(cfg, transcript, ground_truth, partition, seed, targets)
        reports.append(report)
        write_attack_report_csv(run_dir / "attack_report.csv", [report])
        print(
            f"{run_dir}: {report.mode} SIA accuracy {report.accuracy:.3f} "
            f"({report.correct}/{report.n_targets}, baseline {report.random_baseline:.3f})"
        )

    if len(loaded) == 2:
        modes = {loaded[0][1].mode, loaded[1][1].mode}
        if modes != {"standard", "unary_quant"}:
            raise ConfigError(
                f"comparison needs one standard and one unary_quant run, got {sorted(modes)}"
            )
        for field_name in (
            "seed", "clients", "cohort", "rounds", "alpha", "source",
            "subset", "test_subset", "partition_seed", "digits_seed", "layers",
        ):
            a, b = getattr(loaded[0][0], field_name), getattr(loaded[1][0], field_name)
            if a != b:
                raise ConfigError(
                    f"runs are not comparable: {field_name} differs ({a} vs {b})"
                )
        std_pos = 0 if loaded[0][1].mode == "standard" else 1
        uq_pos = 1 - std_pos
        comparison = attack_mod.AttackComparison(
            rows=[
                ("standard", loaded[std_pos][4], reports[std_pos].accuracy),
                ("unary_quant", loaded[uq_pos][4], reports[uq_pos].accuracy),
            ],
            random_baseline=1.0 / cfg0.clients,
        )
        table = comparison.format_table()
        print(table)
        out = run_dirs[0] / "comparison.csv"
        with open(out, "w", newline="") as f:
            csv.writer(f).writerows(comparison.csv_rows())
        (run_dirs[0] / "comparison.txt").write_text(table + "\n")
    return 0


def cmd_budget(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    if args.params is not None:
        n_params = args.params
    else:
        layout = nn.ModelLayout.for_config(
            nn.ModelConfig(layer_sizes=cfg.layers, activation=cfg.activation)
        )
        n_params = layout.size
    r = args.r if args.r is not None else cfg.r
    budget = codec.bit_budget(n_params, r, args.id_bits, args.value_bits)
    print(f"parameters: {n_params}")
    print(f"code length r: {r}")
    print(f"unary_bits: {budget.unary_bits}")
    print(f"quant_payload_bits: {budget.quant_payload_bits}")
    print(f"metadata_bits: {budget.metadata_bits}")
    print(f"total_bits: {budget.total_bits}")
    return 0


def cmd_loss_curve(args: argparse.Namespace) -> int:
    series = []
    for run_dir in args.run_dir:
        run_dir = Path(run_dir)
        metrics_path = run_dir / "metrics.csv"
        if not metrics_path.exists():
            raise ConfigError(f"{run_dir}: missing metrics.csv")
        cfg = load_config(run_dir / "config_effective.ini")
        label = cfg.mode if cfg.mode == "standard" else f"{cfg.mode}_k{cfg.k}"
        with open(metrics_path, newline="") as f:
            rows = list(csv.DictReader(f))
        series.append((label, [row[args.column] for row in rows]))

    n_rounds = max(len(values) for _, values in series)
    header = ["round"] + [label for label, _ in series]
    lines = [",".join(header)]
    for t in range(n_rounds):
        row = [str(t)] + [values[t] if t < len(values) else "" for _, values in series]
        lines.append(",".join(row))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_partition_stats(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    train, _ = load_dataset(cfg)
    partition = build_partition(cfg, train)
    shares = []
    print(f"{'client':>6} {'examples':>9} {'dominant':>9} {'share':>7}  histogram")
    for client_id, shard in enumerate(partition):
        hist = shard.class_histogram
        dominant = int(np.argmax(hist))
        share = hist[dominant] / max(1, len(shard))
        shares.append(share)
        print(
            f"{client_id:>6} {len(shard):>9} {dominant:>9} {share:>7.3f}  {hist.tolist()}"
        )
    print(f"mean dominant-class share: {float(np.mean(shares)):.3f}")
    return 0


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()
    overrides = {}
    for flag, field_name in (
        ("out", "out_dir"),
        ("seed", "seed"),
        ("mode", "mode"),
        ("k", "k"),
        ("r", "r"),
        ("rounds", "rounds"),
        ("clients", "clients"),
        ("alpha", "alpha"),
        ("subset", "subset"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field_name] = value
    if overrides:
        cfg = replace(cfg, **overrides)
        if "clients" in overrides and "cohort" not in overrides and cfg.cohort > cfg.clients:
            cfg = replace(cfg, cohort=cfg.clients)
    validate_config(cfg, "effective config")
    return cfg


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", help="output directory override")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--mode", choices=federation.MODES, help="protocol mode override")
    parser.add_argument("--k", type=int, help="decimal split depth override")
    parser.add_argument("--r", type=int, help="unary code length override")
    parser.add_argument("--rounds", type=int, help="round count override")
    parser.add_argument("--clients", type=int, help="client count override")
    parser.add_argument("--alpha", type=float, help="Dirichlet concentration override")
    parser.add_argument("--subset", type=int, help="training subset size override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unaryquant",
        description="Shuffled unary/quantized federated learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a federation run")
    p_run.add_argument("--config", required=True, help="experiment config file")
    _add_override_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_attack = sub.add_parser("attack", help="source-inference attack on run artifacts")
    p_attack.add_argument("run_dir", nargs="+", help="one or two completed run directories")
    p_attack.add_argument("--targets-per-client", type=int, default=None)
    p_attack.add_argument("--seed", type=int, default=None)
    p_attack.set_defaults(func=cmd_attack)

    p_budget = sub.add_parser("budget", help="per-client per-round bit budget")
    p_budget.add_argument("--config", help="experiment config file")
    p_budget.add_argument("--params", type=int, help="parameter count override")
    p_budget.add_argument("--r", type=int, default=None, help="unary code length")
    p_budget.add_argument("--id-bits", type=int, default=32)
    p_budget.add_argument("--value-bits", type=int, default=64)
    p_budget.set_defaults(func=cmd_budget)

    p_curve = sub.add_parser("loss-curve", help="merge per-round losses across runs")
    p_curve.add_argument("run_dir", nargs="+", help="completed run directories")
    p_curve.add_argument("--out", help="output CSV path (default: stdout)")
    p_curve.add_argument(
        "--column",
        default="train_loss",
        choices=("train_loss", "test_loss", "test_acc"),
        help="metrics column to merge",
    )
    p_curve.set_defaults(func=cmd_loss_curve)

    p_stats = sub.add_parser("partition-stats", help="per-client class histograms")
    p_stats.add_argument("--config", required=True, help="experiment config file")
    _add_override_flags(p_stats)
    p_stats.set_defaults(func=cmd_partition_stats)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
