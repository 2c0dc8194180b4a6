"""Experiment configuration, the seeded runner, and metrics files.

Config files are flat ``key = value`` text, one setting per line; ``#`` or
``;`` start a comment, and lists are comma separated. Body architectures
are given as groups of hidden widths separated by ``|``; client ``c`` uses
group ``c mod n_groups``. See ``configs/`` for annotated examples.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import fedlog
from fedlog import data as fdata
from fedlog import expfam, federation, nn, privacy, stats

TASKS = ("synthetic_circle", "idx_images")
ALGORITHMS = ("fedlog", "fedavg", "lgfedavg1")


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class ExperimentConfig:
    task: str = "synthetic_circle"
    algorithm: str = "fedlog"
    rounds: int = 1
    local_epochs: int = 5
    batch_size: int = 10
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    map_tol: float = expfam.DEFAULT_TOL
    map_max_iters: int = expfam.DEFAULT_MAX_ITERS
    prior_nu: float = 1.0
    n_clients: int = 2
    classes_per_client: int = 2
    hidden: list = field(default_factory=lambda: [[16, 16], [16]])
    m: int = 3
    feature_clamp: float | None = None
    epsilon: float | None = None
    delta: float = privacy.DEFAULT_DELTA
    clip_bound: float = privacy.DEFAULT_CLIP_BOUND
    privacy_mode: str = "local"
    noise_source: str = "seeded"
    wire_float_bits: int = 64
    seeds: list = field(default_factory=lambda: [0])
    workers: int = 1
    record_wall_time: bool = False
    # synthetic_circle
    n_train: int = 80
    n_test_per_client: int = 400
    # idx_images
    data_dir: str = ""
    train_fraction: float = 1.0

    @property
    def privacy(self):
        if self.epsilon is None:
            return None
        return privacy.PrivacyParams(self.epsilon, self.delta, self.clip_bound)

    @property
    def body_clamp(self):
        if self.feature_clamp is not None:
            return self.feature_clamp
        return self.clip_bound if self.epsilon is not None else None

    def train_config(self):
        return nn.TrainConfig(self.learning_rate, self.batch_size, self.local_epochs, self.optimizer)

    def validate(self):
        problems = []
        if self.task not in TASKS:
            problems.append(f"task: must be one of {', '.join(TASKS)}, got {self.task!r}")
        if self.algorithm not in ALGORITHMS:
            problems.append(f"algorithm: must be one of {', '.join(ALGORITHMS)}, got {self.algorithm!r}")
        for name in ("batch_size", "map_max_iters", "n_clients", "classes_per_client", "workers"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be >= 1, got {getattr(self, name)}")
        for name in ("rounds", "local_epochs"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be >= 0, got {getattr(self, name)}")
        for name in ("learning_rate", "map_tol", "clip_bound"):
            if not getattr(self, name) > 0:
                problems.append(f"{name}: must be > 0, got {getattr(self, name)}")
        if self.prior_nu < 1:
            problems.append(f"prior_nu: must be >= 1, got {self.prior_nu}")
        if self.optimizer not in ("adam", "sgd"):
            problems.append(f"optimizer: must be adam or sgd, got {self.optimizer!r}")
        if self.m < 2:
            problems.append(f"m: must be >= 2 (one feature is the constant 1), got {self.m}")
        if not self.hidden or any(not g or any(w < 1 for w in g) for g in self.hidden):
            problems.append("hidden: every group needs at least one positive width")
        if self.algorithm == "fedavg" and len({tuple(g) for g in self.hidden}) > 1:
            problems.append("hidden: fedavg averages whole bodies, so all groups must match")
        if self.feature_clamp is not None and not self.feature_clamp > 0:
            problems.append(f"feature_clamp: must be > 0, got {self.feature_clamp}")
        if self.epsilon is not None:
            if not self.epsilon > 0:
                problems.append(f"epsilon: must be > 0, got {self.epsilon}")
            if not 0 < self.delta < 1:
                problems.append(f"delta: must lie in (0, 1), got {self.delta}")
            if self.feature_clamp is not None and self.feature_clamp > self.clip_bound:
                problems.append("feature_clamp: must not exceed clip_bound when epsilon is set")
            if self.algorithm != "fedlog":
                problems.append("epsilon: privacy noise is only defined for fedlog")
        if self.privacy_mode not in ("local", "global"):
            problems.append(f"privacy_mode: must be local or global, got {self.privacy_mode!r}")
        if self.noise_source not in ("seeded", "entropy"):
            problems.append(f"noise_source: must be seeded or entropy, got {self.noise_source!r}")
        if self.wire_float_bits not in (32, 64):
            problems.append(f"wire_float_bits: must be 32 or 64, got {self.wire_float_bits}")
        if not self.seeds:
            problems.append("seeds: need at least one seed")
        elif any(s < 0 for s in self.seeds):
            problems.append("seeds: must be non-negative")
        if self.task == "synthetic_circle":
            if self.n_clients != 2:
                problems.append("n_clients: the circle task has exactly 2 clients")
            if self.n_train < 2 or self.n_train % 2:
                problems.append(f"n_train: must be a positive even number, got {self.n_train}")
            if self.n_test_per_client < 1:
                problems.append(f"n_test_per_client: must be >= 1, got {self.n_test_per_client}")
        if self.task == "idx_images":
            if not self.data_dir:
                problems.append("data_dir: required for idx_images")
            if not 0 < self.train_fraction <= 1:
                problems.append(f"train_fraction: must lie in (0, 1], got {self.train_fraction}")
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_OPTIONAL_FLOATS = {"feature_clamp", "epsilon"}


def _parse_value(name, text):
    text = text.strip()
    if name in _OPTIONAL_FLOATS:
        return None if text.lower() in ("", "none") else float(text)
    if name == "hidden":
        return [[int(w) for w in group.split(",") if w.strip()] for group in text.split("|")]
    if name == "seeds":
        return parse_seed_list(text)
    kind = type(getattr(ExperimentConfig(), name))
    if kind is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text)


def parse_seed_list(text):
    """``"0,1,2"`` or a range ``"0-9"`` (inclusive), or a mix of both."""
    seeds = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return seeds


def config_from_mapping(values):
    """Build and validate a config from string (or already typed) values."""
    problems = []
    kwargs = {}
    for key, raw in values.items():
        if key not in _FIELDS:
            problems.append(f"{key}: unknown setting")
            continue
        try:
            kwargs[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(**kwargs).validate()


def read_config_text(text):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    parser.read_string("[experiment]\n" + text)
    return dict(parser["experiment"])


def load_config(path, overrides=None):
    values = read_config_text(Path(path).read_text())
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_mapping(values)


# --- metrics ---------------------------------------------------------------

CSV_FIELDS = (
    "seed",
    "round",
    "algorithm",
    "mean_test_accuracy",
    "client_acc_mean",
    "client_acc_min",
    "client_acc_max",
    "mean_train_accuracy",
    "uplink_bits_per_client",
    "downlink_bits_per_client",
    "map_iterations",
    "map_converged",
    "wall_ms",
)


@dataclass
class MetricsRow:
    seed: int
    round: int
    algorithm: str
    mean_test_accuracy: float
    client_acc_mean: float
    client_acc_min: float
    client_acc_max: float
    mean_train_accuracy: float
    uplink_bits_per_client: int
    downlink_bits_per_client: int
    map_iterations: int
    map_converged: bool
    wall_ms: float


_ROW_TYPES = {f.name: f.type for f in dataclasses.fields(MetricsRow)}


def _format(value):
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name, text):
    kind = _ROW_TYPES[name]
    if kind == "bool":
        return text == "1"
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def metrics_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for row in rows:
        writer.writerow([_format(getattr(row, name)) for name in CSV_FIELDS])
    return buf.getvalue()


def write_metrics(rows, path, config=None):
    """Write ``rows`` to ``path`` (CSV) and a ``.json`` sidecar next to it."""
    path = Path(path)
    sidecar = path.with_suffix(".json")
    meta = {"fedlog_version": fedlog.__version__, "csv_fields": list(CSV_FIELDS)}
    if config is not None:
        meta["config"] = config.to_dict()
        if config.epsilon is not None:
            meta["privacy"] = {
                "epsilon": config.epsilon,
                "delta": config.delta,
                "clip_bound": config.clip_bound,
                "mode": config.privacy_mode,
                "sigma": privacy.noise_sigma(config.privacy, config.m),
                "note": "guarantee is per message; composition over rounds is not accounted",
            }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(metrics_csv(rows))
        sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc
    return path


def read_metrics(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [MetricsRow(**{k: _coerce(k, v) for k, v in rec.items()}) for rec in reader]


# --- runner ----------------------------------------------------------------


@dataclass
class _SeedData:
    train: list
    test: list
    in_dim: int
    n_class: int


def _build_data(config, rng, test_rng):
    if config.task == "synthetic_circle":
        full = fdata.gen_circle(config.n_train, rng)
        c0, c1 = fdata.split_by_sorted_x1(full)
        t0, t1 = fdata.circle_test_sets(c0, c1, config.n_test_per_client, test_rng)
        return _SeedData([c0, c1], [t0, t1], 2, 2)
    train = fdata.load_idx_split(config.data_dir, "train")
    test = fdata.load_idx_split(config.data_dir, "test")
    n_class = max(train.n_class, test.n_class)
    train = fdata.LabeledDataset(train.inputs, train.labels, n_class)
    test = fdata.LabeledDataset(test.inputs, test.labels, n_class)
    train = fdata.stratified_subsample(train, config.train_fraction, rng)
    spec = fdata.PartitionSpec(config.n_clients, config.classes_per_client, int(rng.integers(2**32)))
    parts = fdata.shard_partition(train, spec)
    return _SeedData(parts, fdata.distribute_test(test, parts, test_rng), train.inputs.shape[1], n_class)


def _setup(config, seed):
    root = np.random.SeedSequence(seed)
    data_ss, test_ss, head_ss, body_ss, shuffle_ss, noise_ss = root.spawn(6)
    data = _build_data(config, np.random.default_rng(data_ss), np.random.default_rng(test_ss))
    head = nn.init_head(data.n_class, config.m, np.random.default_rng(head_ss))
    n = len(data.train)
    body_rngs = [np.random.default_rng(s) for s in body_ss.spawn(n + 1)]
    shuffle_rngs = [np.random.default_rng(s) for s in shuffle_ss.spawn(n)]
    noise_seqs = noise_ss.spawn(n + 1)
    train_cfg = config.train_config()
    clients = []
    for c in range(n):
        group = config.hidden[c % len(config.hidden)]
        body = nn.init_body(data.in_dim, group, config.m, body_rngs[c], config.body_clamp)
        noise_rng = None
        if config.noise_source == "seeded":
            noise_rng = privacy.noise_generator(noise_seqs[c])
        clients.append(
            federation.ClientState(
                c, body, data.train[c], data.test[c], train_cfg, shuffle_rngs[c], noise_rng, head.copy()
            )
        )
    server = federation.ServerState(
        head.copy(),
        expfam.PriorParams(np.zeros_like(head), config.prior_nu),
        map_tol=config.map_tol,
        map_max_iters=config.map_max_iters,
    )
    if config.noise_source == "seeded":
        server.noise_rng = privacy.noise_generator(noise_seqs[n])
    if config.algorithm == "fedavg":
        server.body = nn.init_body(data.in_dim, config.hidden[0], config.m, body_rngs[n], config.body_clamp)
        for client in clients:
            client.body = server.body.copy()
    return server, clients


def _metrics_row(config, seed, rnd, clients, head_for, report, wall_ms):
    per_client = {}
    correct = total = 0
    train_correct = train_total = 0
    for client in clients:
        head = head_for(client)
        test_eval = federation.evaluate([client], head, "test")
        train_eval = federation.evaluate([client], head, "train")
        per_client[client.id] = test_eval.per_client[client.id]
        if test_eval.mean is not None:
            correct += test_eval.mean * len(client.test)
            total += len(client.test)
        if train_eval.mean is not None:
            train_correct += train_eval.mean * len(client.train)
            train_total += len(client.train)
    vals = [v for v in per_client.values() if v is not None]
    nan = float("nan")
    return MetricsRow(
        seed=seed,
        round=rnd,
        algorithm=config.algorithm,
        mean_test_accuracy=correct / total if total else nan,
        client_acc_mean=float(np.mean(vals)) if vals else nan,
        client_acc_min=float(np.min(vals)) if vals else nan,
        client_acc_max=float(np.max(vals)) if vals else nan,
        mean_train_accuracy=train_correct / train_total if train_total else nan,
        uplink_bits_per_client=max(report.uplink_bits.values(), default=0) if report else 0,
        downlink_bits_per_client=report.downlink_bits if report else 0,
        map_iterations=report.map_iterations if report else 0,
        map_converged=report.map_converged if report else True,
        wall_ms=wall_ms,
    )


def run_seed(config, seed, executor=None):
    """All rounds of one seed; one row after initialization and one per round."""
    server, clients = _setup(config, seed)
    if config.algorithm == "fedlog":
        head_for = lambda client: server.head  # noqa: E731
    else:
        head_for = lambda client: client.head  # noqa: E731
    rows = [_metrics_row(config, seed, 0, clients, head_for, None, 0.0)]
    for rnd in range(1, config.rounds + 1):
        start = time.perf_counter()
        if config.algorithm == "fedlog":
            report = federation.fedlog_round(
                server,
                clients,
                config.privacy,
                config.privacy_mode,
                config.wire_float_bits,
                executor,
            )
        elif config.algorithm == "lgfedavg1":
            report = federation.lgfedavg_round(server, clients, config.wire_float_bits, executor)
        else:
            report = federation.fedavg_round(server, clients, config.wire_float_bits, executor)
        wall = (time.perf_counter() - start) * 1e3 if config.record_wall_time else 0.0
        rows.append(_metrics_row(config, seed, rnd, clients, head_for, report, wall))
    return rows


def run_experiment(config):
    config.validate()
    executor = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        rows = []
        for seed in config.seeds:
            rows.extend(run_seed(config, seed, executor))
        return rows
    finally:
        if executor is not None:
            executor.shutdown()


def message_size_bits(m, n_class, float_bits):
    """Payload bits of one last-layer-sized message."""
    return federation.message_size_bits(m, n_class, float_bits)


# --- summaries -------------------------------------------------------------


def mean_and_se(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return math.nan, math.nan
    se = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    return float(values.mean()), se


def final_accuracies(rows):
    """``{algorithm: {seed: accuracy at that seed's last round}}``."""
    last = {}
    for row in rows:
        key = (row.algorithm, row.seed)
        if key not in last or row.round > last[key].round:
            last[key] = row
    out = {}
    for (alg, seed), row in sorted(last.items()):
        out.setdefault(alg, {})[seed] = row.mean_test_accuracy
    return out


def summary_report(rows, threshold=0.01):
    """Plain-text table of final accuracy (mean +- SE over seeds) and pairwise tests."""
    finals = final_accuracies(rows)
    lines = ["algorithm   seeds  final accuracy (mean +- SE)  uplink bits/client"]
    uplink = {}
    for row in rows:
        uplink[row.algorithm] = max(uplink.get(row.algorithm, 0), row.uplink_bits_per_client)
    for alg, by_seed in finals.items():
        mean, se = mean_and_se(list(by_seed.values()))
        lines.append(f"{alg:<11} {len(by_seed):>5}  {mean:.4f} +- {se:.4f}{'':>13}{uplink[alg]:>10}")
    algs = list(finals)
    if len(algs) > 1:
        lines.append("")
        lines.append(f"one-tailed Wilcoxon on paired seeds (* marks p < {threshold})")
        for a in algs:
            for b in algs:
                if a == b:
                    continue
                seeds = sorted(set(finals[a]) & set(finals[b]))
                if not seeds:
                    continue
                res = stats.wilcoxon_one_tailed(
                    [finals[a][s] for s in seeds], [finals[b][s] for s in seeds]
                )
                mark = "*" if res.p_value < threshold and not res.undefined else " "
                note = " (all pairs tied)" if res.undefined else ""
                lines.append(f"  {a} > {b}: p = {res.p_value:.4g} {mark} n={res.n}{note}")
    return "\n".join(lines) + "\n"
