"""Command-line experiment runner.

Subcommands: ``run``, ``ablate``, ``fetch``, ``score-crl`` and ``report``.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import gzip
import hashlib
import io
import json
import logging
import math
import sys
import tarfile
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DATA_DIR_ENV,
    MNIST_FILES,
    default_data_dir,
    load_mnist,
    make_blob_stream,
    make_permuted_tasks,
    make_split_tasks,
    subsample,
)
from .diversity import DiversityConfig
from .errors import ConfigError
from .linalg import RngState
from .metrics import RewardLog, crl_scores
from .protocol import MetricsWriter, ReplayConfig, run_protocol
from .replay import vae_config
from .trainer import TrainConfig

log = logging.getLogger("hvcl")

SCHEMA_VERSION = 1
BENCHMARKS = ("split-mnist", "permuted-mnist", "blobs")
ABLATION_ARMS = ("baseline", "h-penalty", "dpp", "dpp+h-penalty")

MNIST_SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}
MNIST_GZ_MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)
MNIST_NPM_TARBALL = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz"


# ---------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    benchmark: str = "blobs"
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs/default"
    replay: bool = False
    data_dir: str | None = None
    n_tasks: int = 5
    n_train: int | None = None  # per-task subsample, None keeps everything
    n_test: int | None = None
    identity_first: bool = True
    blob_dim: int = 2
    blob_classes: int = 2
    train: TrainConfig = field(default_factory=TrainConfig)
    replay_cfg: ReplayConfig = field(default_factory=ReplayConfig)

    def stream(self, seed):
        rng = RngState(seed).split(7)
        if self.benchmark == "blobs":
            stream = make_blob_stream(self.n_tasks, self.blob_classes, self.blob_dim, rng)
        else:
            tx, ty, vx, vy = load_mnist(self.data_dir)
            if self.benchmark == "split-mnist":
                stream = make_split_tasks(tx, ty, vx, vy)
            else:
                stream = make_permuted_tasks(tx, ty, vx, vy, self.n_tasks, rng.split(0), self.identity_first)
        if self.n_train is not None or self.n_test is not None:
            stream = subsample(stream, self.n_train, self.n_test, rng.split(1))
        return stream


EXPERIMENT_KEYS = ("benchmark", "seeds", "output_dir", "replay", "data_dir", "n_tasks", "n_train",
                   "n_test", "identity_first", "blob_dim", "blob_classes")
REPLAY_KEYS = ("latent_dim", "samples_per_task", "generator_rehearsal", "score_samples")


def _parse_bool(key, text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _coerce(key, text, like):
    """Convert ``text`` to the type of the default value ``like``."""
    try:
        if isinstance(like, bool):
            return _parse_bool(key, text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    return text.strip()


def _dataclass_from_section(cls, section, name, base=None, extra_keys=()):
    base = base if base is not None else cls()
    known = {f.name for f in dataclasses.fields(cls) if f.name != "diversity"}
    updates, extra = {}, {}
    for key, text in section.items():
        if key in extra_keys:
            extra[key] = text
        elif key in known:
            updates[key] = _coerce(f"[{name}] {key}", text, getattr(base, key))
        else:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
    try:
        return dataclasses.replace(base, **updates), extra
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def parse_config(text):
    """Parse an INI experiment description; unknown sections or keys raise
    ``ConfigError``."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    allowed = {"experiment", "train", "diversity", "replay"}
    for sec in cp.sections():
        if sec not in allowed:
            raise ConfigError(f"unknown section [{sec}]")
    exp = ExperimentConfig()
    if cp.has_section("experiment"):
        for key, text in cp["experiment"].items():
            if key not in EXPERIMENT_KEYS:
                raise ConfigError(f"unknown key {key!r} in section [experiment]")
            if key == "seeds":
                try:
                    exp.seeds = [int(s) for s in text.replace(",", " ").split()]
                except ValueError:
                    raise ConfigError(f"[experiment] seeds: cannot parse {text!r}") from None
            elif key in ("n_train", "n_test", "data_dir"):
                val = text.strip()
                if val.lower() in ("", "none"):
                    setattr(exp, key, None)
                else:
                    setattr(exp, key, _coerce(f"[experiment] {key}", val, 0) if key != "data_dir" else val)
            else:
                setattr(exp, key, _coerce(f"[experiment] {key}", text, getattr(exp, key)))
    if exp.benchmark not in BENCHMARKS:
        raise ConfigError(f"[experiment] benchmark must be one of {BENCHMARKS}, got {exp.benchmark!r}")
    if not exp.seeds:
        raise ConfigError("[experiment] seeds is empty")
    if exp.n_tasks < 1:
        raise ConfigError("[experiment] n_tasks must be >= 1")
    diversity = DiversityConfig()
    if cp.has_section("diversity"):
        diversity, _ = _dataclass_from_section(DiversityConfig, cp["diversity"], "diversity")
    train = TrainConfig(diversity=diversity)
    if cp.has_section("train"):
        train, _ = _dataclass_from_section(TrainConfig, cp["train"], "train", base=train)
    exp.train = train
    vae = vae_config()
    replay = ReplayConfig(vae=vae)
    if cp.has_section("replay"):
        vae, extra = _dataclass_from_section(TrainConfig, cp["replay"], "replay", base=vae, extra_keys=REPLAY_KEYS)
        kwargs = {k: _coerce(f"[replay] {k}", v, getattr(replay, k)) for k, v in extra.items()}
        replay = dataclasses.replace(replay, vae=vae, **kwargs)
    exp.replay_cfg = replay
    return exp


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def resolved_config_text(exp):
    """INI text that reproduces ``exp`` exactly."""
    cp = configparser.ConfigParser(interpolation=None)

    def put(section, values):
        cp[section] = {}
        for k, v in values.items():
            if isinstance(v, (tuple, list)):
                v = ", ".join(str(x) for x in v)
            elif v is None:
                v = "none"
            cp[section][k] = str(v)

    put("experiment", {k: getattr(exp, k) for k in EXPERIMENT_KEYS})
    train = {f.name: getattr(exp.train, f.name) for f in dataclasses.fields(TrainConfig) if f.name != "diversity"}
    put("train", train)
    put("diversity", dataclasses.asdict(exp.train.diversity))
    rep = {f.name: getattr(exp.replay_cfg.vae, f.name) for f in dataclasses.fields(TrainConfig) if f.name != "diversity"}
    rep.update({k: getattr(exp.replay_cfg, k) for k in REPLAY_KEYS})
    put("replay", rep)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------- run


def _seed_config(exp, seed):
    return dataclasses.replace(exp.train, seed=seed)


def run_seed(exp, seed, out_dir, train_cfg=None):
    """One protocol run; writes metrics.csv, report.json, accuracy_matrix.csv
    and checkpoint.json into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = train_cfg if train_cfg is not None else _seed_config(exp, seed)
    stream = exp.stream(seed)
    replay = exp.replay_cfg if exp.replay else None
    with MetricsWriter(out_dir / "metrics.csv", len(stream)) as metrics:
        report, net = run_protocol(stream, cfg, replay=replay, rng=RngState(seed), metrics=metrics)
    report.to_json(out_dir / "report.json")
    report.matrix_csv(out_dir / "accuracy_matrix.csv")
    save_checkpoint(net, out_dir / "checkpoint.json")
    return report


def save_checkpoint(net, path):
    Path(path).write_text(json.dumps({"schema_version": SCHEMA_VERSION, "network": net.to_dict()}))


def load_checkpoint(path):
    from .network import MoveNetwork

    d = json.loads(Path(path).read_text())
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"checkpoint schema {d.get('schema_version')} is not {SCHEMA_VERSION}")
    return MoveNetwork.from_dict(d["network"])


def _write_manifest(out_dir, kind, exp, files):
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "package_version": __version__,
        "benchmark": exp.benchmark,
        "seeds": exp.seeds,
        "files": sorted(files),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def _prepare_run_dir(exp):
    out = Path(exp.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(resolved_config_text(exp))
    (out / "seeds.json").write_text(json.dumps(exp.seeds) + "\n")
    return out


def final_row(metrics_path):
    """The post-consolidation evaluation row of the last task."""
    with open(metrics_path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["epoch"] == "0"]
    if not rows:
        raise ValueError(f"{metrics_path} has no end-of-task rows")
    return rows[-1]


def last_epoch_row(metrics_path):
    with open(metrics_path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["epoch"] != "0"]
    return rows[-1] if rows else None


def mean_std(values):
    """Mean and sample standard deviation (NaN for a single value)."""
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), (float(a.std(ddof=1)) if a.size > 1 else float("nan"))


def summarize_run(out_dir):
    """Fold the per-seed metrics CSVs into ``summary.csv``; returns the rows."""
    out_dir = Path(out_dir)
    seed_dirs = sorted(out_dir.glob("seed_*"), key=lambda p: int(p.name.split("_")[1]))
    per_seed = []
    for d in seed_dirs:
        row = final_row(d / "metrics.csv")
        per_seed.append((int(d.name.split("_")[1]), float(row["avg_accuracy"]),
                         float(row["eval_mi_bits"]), float(row["eval_h_marg_bits"])))
    if not per_seed:
        raise ValueError(f"no seed directories under {out_dir}")
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "final_avg_accuracy", "mi_bits", "h_marg_bits"])
        for s in per_seed:
            w.writerow([s[0]] + [repr(v) for v in s[1:]])
        for label, fn in (("mean", lambda a: mean_std(a)[0]), ("std", lambda a: mean_std(a)[1])):
            w.writerow([label] + [repr(fn([s[i] for s in per_seed])) for i in (1, 2, 3)])
    return per_seed


def format_summary(per_seed):
    m, s = mean_std([p[1] for p in per_seed])
    lines = [f"{'seed':>6} {'final avg acc':>14} {'I(M;X) bits':>12} {'H(M) bits':>10}"]
    lines += [f"{p[0]:>6} {p[1]:>14.4f} {p[2]:>12.4f} {p[3]:>10.4f}" for p in per_seed]
    std = "n/a" if math.isnan(s) else f"{s:.4f}"
    lines.append(f"final average accuracy: {m:.4f} +/- {std} (n={len(per_seed)})")
    return "\n".join(lines)


def cmd_run(config_path):
    exp = load_config(config_path)
    out = _prepare_run_dir(exp)
    files = ["config.ini", "seeds.json", "summary.csv"]
    for seed in exp.seeds:
        run_seed(exp, seed, out / f"seed_{seed}")
        files += [f"seed_{seed}/{n}" for n in ("metrics.csv", "report.json", "accuracy_matrix.csv", "checkpoint.json")]
    per_seed = summarize_run(out)
    _write_manifest(out, "run", exp, files)
    print(format_summary(per_seed))
    return 0


# ---------------------------------------------------------------- ablation


def arm_config(train, arm, entropy_weight, dpp_weight):
    div = train.diversity
    weights = {
        "baseline": (0.0, 0.0),
        "h-penalty": (entropy_weight, 0.0),
        "dpp": (0.0, dpp_weight),
        "dpp+h-penalty": (entropy_weight, dpp_weight),
    }[arm]
    div = dataclasses.replace(div, entropy_weight=weights[0], dpp_weight=weights[1])
    return dataclasses.replace(train, diversity=div)


ABLATION_DEFAULT_ENTROPY = 1.0
ABLATION_DEFAULT_DPP = 0.01


def summarize_ablation(out_dir):
    """Fold every arm/seed metrics CSV into ``ablation.csv`` (one row per arm
    and seed) and return the per-arm means."""
    out_dir = Path(out_dir)
    rows = []
    for arm in ABLATION_ARMS:
        arm_dir = out_dir / arm.replace("+", "_")
        for d in sorted(arm_dir.glob("seed_*"), key=lambda p: int(p.name.split("_")[1])):
            fin = final_row(d / "metrics.csv")
            last = last_epoch_row(d / "metrics.csv")
            min_w2 = float(last["min_w2"]) if last is not None and last["min_w2"] else float("nan")
            rows.append({"arm": arm, "seed": int(d.name.split("_")[1]),
                         "final_avg_accuracy": float(fin["avg_accuracy"]),
                         "mi_bits": float(fin["eval_mi_bits"]), "h_marg_bits": float(fin["eval_h_marg_bits"]),
                         "min_w2": min_w2})
    cols = ("arm", "seed", "final_avg_accuracy", "mi_bits", "h_marg_bits", "min_w2")
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if c in ("arm", "seed") else repr(r[c]) for c in cols])
    means = {}
    for arm in ABLATION_ARMS:
        sel = [r for r in rows if r["arm"] == arm]
        if sel:
            means[arm] = {c: float(np.mean([r[c] for r in sel])) for c in cols[2:]}
    return rows, means


def format_ablation(means):
    lines = [f"{'arm':>14} {'accuracy':>9} {'I(M;X)':>8} {'H(M)':>8} {'min W2^2':>10}"]
    for arm, m in means.items():
        lines.append(f"{arm:>14} {m['final_avg_accuracy']:>9.4f} {m['mi_bits']:>8.4f} "
                     f"{m['h_marg_bits']:>8.4f} {m['min_w2']:>10.4g}")
    return "\n".join(lines)


def cmd_ablate(config_path):
    exp = load_config(config_path)
    out = _prepare_run_dir(exp)
    div = exp.train.diversity
    ent = div.entropy_weight if div.entropy_weight > 0 else ABLATION_DEFAULT_ENTROPY
    dpp = div.dpp_weight if div.dpp_weight > 0 else ABLATION_DEFAULT_DPP
    files = ["config.ini", "seeds.json", "ablation.csv"]
    for arm in ABLATION_ARMS:
        for seed in exp.seeds:
            cfg = dataclasses.replace(arm_config(exp.train, arm, ent, dpp), seed=seed)
            rel = f"{arm.replace('+', '_')}/seed_{seed}"
            run_seed(exp, seed, out / rel, train_cfg=cfg)
            files.append(f"{rel}/metrics.csv")
    _, means = summarize_ablation(out)
    _write_manifest(out, "ablation", exp, files)
    print(format_ablation(means))
    return 0


# ---------------------------------------------------------------- fetch


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _verified(path, digest):
    return path.exists() and sha256_file(path) == digest


def _download(url, timeout=60):
    with urllib.request.urlopen(url, timeout=timeout) as resp:
        return resp.read()


def _fetch_gz(name, mirror):
    return gzip.decompress(_download(mirror + name + ".gz"))


def _fetch_npm_tarball():
    """All four IDX files from the npm package tarball, keyed by file name."""
    raw = _download(MNIST_NPM_TARBALL, timeout=300)
    found = {}
    with tarfile.open(fileobj=io.BytesIO(raw), mode="r:gz") as tar:
        for member in tar.getmembers():
            base = Path(member.name).name
            if base in MNIST_SHA256:
                found[base] = tar.extractfile(member).read()
    return found


def fetch_mnist(target, downloader=None):
    """Make ``target`` hold checksum-verified IDX files.  Returns the list of
    files that had to be (re)downloaded.  Raises ``RuntimeError`` if some
    file cannot be obtained from any source."""
    target = Path(target)
    target.mkdir(parents=True, exist_ok=True)
    missing = [n for n, d in MNIST_SHA256.items() if not _verified(target / n, d)]
    if not missing:
        return []
    sources = downloader if downloader is not None else _default_sources()
    errors = []
    still = list(missing)
    for source in sources:
        if not still:
            break
        try:
            blobs = source(still)
        except (urllib.error.URLError, OSError, EOFError, tarfile.TarError) as exc:
            errors.append(f"{getattr(source, '__name__', source)}: {exc}")
            continue
        for name in list(still):
            data = blobs.get(name)
            if data is None or hashlib.sha256(data).hexdigest() != MNIST_SHA256[name]:
                continue
            tmp = target / (name + ".part")
            tmp.write_bytes(data)
            tmp.replace(target / name)
            still.remove(name)
    if still:
        detail = "; ".join(errors) if errors else "checksums did not match"
        raise RuntimeError(
            f"could not obtain {', '.join(still)} ({detail}). Copy the four uncompressed MNIST IDX "
            f"files ({', '.join(MNIST_FILES.values())}) into {target} or point {DATA_DIR_ENV} at a "
            f"directory that holds them, then rerun `hvcl fetch mnist`."
        )
    return missing


def _default_sources():
    def mirror_source(mirror):
        def source(names):
            out = {}
            for n in names:
                try:
                    out[n] = _fetch_gz(n, mirror)
                except (urllib.error.URLError, OSError, EOFError):
                    continue
            if not out:
                raise OSError(f"{mirror} unreachable")
            return out

        source.__name__ = mirror
        return source

    def npm_source(names):
        return _fetch_npm_tarball()

    npm_source.__name__ = MNIST_NPM_TARBALL
    return [mirror_source(m) for m in MNIST_GZ_MIRRORS] + [npm_source]


def cmd_fetch(dataset, directory):
    if dataset != "mnist":
        raise ConfigError(f"unknown dataset {dataset!r}; only 'mnist' is supported")
    target = Path(directory) if directory else default_data_dir()
    fetched = fetch_mnist(target)
    if fetched:
        print(f"downloaded and verified {len(fetched)} file(s) into {target}")
    else:
        print(f"all files present and verified in {target}")
    return 0


# ---------------------------------------------------------------- misc


def cmd_score_crl(path, t=None):
    scores = crl_scores(RewardLog.from_csv(path))
    if t is not None:
        if t not in scores:
            raise ConfigError(f"the log does not cover task {t}")
        scores = {t: scores[t]}
    for k, v in scores.items():
        print(f"J({k}) = {v:.6f}")
    return 0


def cmd_report(directory):
    out = Path(directory)
    if (out / "ablation.csv").exists() or any((out / a.replace("+", "_")).is_dir() for a in ABLATION_ARMS):
        _, means = summarize_ablation(out)
        print(format_ablation(means))
    else:
        print(format_summary(summarize_run(out)))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="hvcl", description="Continual learning with mixtures of variational experts.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-task progress")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the continual-learning protocol for every seed")
    r.add_argument("config")
    a = sub.add_parser("ablate", help="four-arm diversity ablation")
    a.add_argument("config")
    f = sub.add_parser("fetch", help="download and verify a dataset")
    f.add_argument("dataset", choices=["mnist"])
    f.add_argument("--dir", default=None, help=f"target directory (default: ${DATA_DIR_ENV} or ~/.cache/hvcl/mnist)")
    s = sub.add_parser("score-crl", help="retention score of a reward log CSV")
    s.add_argument("rewardlog")
    s.add_argument("--t", type=int, default=None)
    rep = sub.add_parser("report", help="summarize a finished run directory")
    rep.add_argument("dir")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config)
        if args.command == "ablate":
            return cmd_ablate(args.config)
        if args.command == "fetch":
            return cmd_fetch(args.dataset, args.dir)
        if args.command == "score-crl":
            return cmd_score_crl(args.rewardlog, args.t)
        if args.command == "report":
            return cmd_report(args.dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI reports every failure as exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
