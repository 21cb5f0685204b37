"""Command-line driver: ``jumpsae <command> [--config FILE] [--key value ...] [key=value ...]``.

Settings come from an optional key=value config file, then flags, then bare
``key=value`` arguments (later wins). Unknown keys are rejected. Every command
that writes artifacts also writes a manifest next to them recording the
resolved settings and the SHA-256 of each artifact; rerunning a command whose
manifest matches both its settings and the artifacts on disk does nothing.

Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import glob
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .core import INFERENCE, ParamFormatError, save_params
from .io import atomic_write_bytes, atomic_write_text, dump_kv, parse_kv, read_kv, sha256_file
from .store import ShardDataset, ShardFormatError, SiteSpec
from .trainer import NumericError, TrainPlan

log = logging.getLogger("jumpsae")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
REQUIRED = object()


class ConfigError(ValueError):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(text) -> list[str]:
    return [p.strip() for p in str(text).split(",") if p.strip()]


def parse_site(text: str) -> SiteSpec:
    site, sep, layer = str(text).rpartition(":")
    if not sep or not layer.isdigit():
        raise ValueError(f"expected site:layer, got {text!r}")
    return SiteSpec(site, int(layer))


@dataclass(frozen=True)
class Key:
    cast: object
    default: object = REQUIRED
    help: str = ""


def _plan_keys() -> dict[str, Key]:
    casts = {"float": float, "int": int, "str": str}
    out = {}
    for f in fields(TrainPlan):
        cast = casts[f.type]
        default = REQUIRED if f.name == "seed" else f.default
        out[f.name] = Key(cast, default, f"training: {f.name}")
    return out


# --- commands -------------------------------------------------------------

COMMANDS: dict[str, tuple] = {}


def command(name: str, keys: dict[str, Key], help: str):
    def deco(fn):
        COMMANDS[name] = (fn, keys, help)
        return fn

    return deco


def resolve(keys: dict[str, Key], raw: dict[str, str]) -> dict:
    unknown = sorted(set(raw) - set(keys))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}")
    cfg = {}
    for name, key in keys.items():
        if name in raw:
            try:
                cfg[name] = key.cast(raw[name])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {name!r}: {exc}") from None
        elif key.default is REQUIRED:
            raise ConfigError(f"missing required key {name!r}")
        else:
            cfg[name] = key.default
    return cfg


# manifests ------------------------------------------------------------------


def manifest_path(out: Path) -> Path:
    return out / "manifest.txt" if out.is_dir() or not out.suffix else out.with_name(out.name + ".manifest")


def _manifest_text(name: str, cfg: dict, artifacts: list[Path]) -> str:
    items = {"command": name, "version": __version__}
    items.update({f"config.{k}": v for k, v in sorted(cfg.items())})
    for p in sorted(artifacts):
        items[f"artifact.{p.name}.sha256"] = sha256_file(p)
    return dump_kv(items)


def write_manifest(out: Path, name: str, cfg: dict, artifacts: list[Path]) -> Path:
    path = manifest_path(out)
    atomic_write_text(path, _manifest_text(name, cfg, artifacts))
    return path


def up_to_date(out: Path, name: str, cfg: dict) -> bool:
    path = manifest_path(out)
    if not path.exists():
        return False
    try:
        old = read_kv(path)
    except (OSError, ValueError):
        return False
    arts = [k[len("artifact.") : -len(".sha256")] for k in old if k.startswith("artifact.")]
    paths = [path.parent / a for a in arts]
    if not arts or not all(p.exists() for p in paths):
        return False
    return path.read_text() == _manifest_text(name, cfg, paths)


# helpers ------------------------------------------------------------------


def find_shards(spec: str, site: SiteSpec | None = None) -> list[Path]:
    """Shard files named by a directory, glob, or comma list, optionally filtered by site."""
    paths: list[Path] = []
    for part in _list(spec):
        p = Path(part)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.ashd")))
        elif any(ch in part for ch in "*?["):
            paths.extend(Path(q) for q in sorted(glob.glob(part)))
        else:
            paths.append(p)
    if site is not None:
        tag = f"_{site.site}_{site.layer}_"
        paths = [p for p in paths if tag in p.name]
    if not paths:
        raise FileNotFoundError(f"no shards found for {spec!r}" + (f" at {site.site}:{site.layer}" if site else ""))
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(p)
    return paths


def read_norm(value: str) -> float:
    """A norm constant given literally or as the file written by ``estimate-norm``."""
    try:
        return float(value)
    except ValueError:
        pass
    return float(read_kv(value)["c"])


def load_corpus(path) -> np.ndarray:
    arr = np.load(path, allow_pickle=False)
    if arr.ndim != 2 or arr.dtype.kind not in "iu":
        raise ValueError(f"{path}: corpus must be a 2-D integer array")
    return arr


def _save_npy(path: Path, arr: np.ndarray) -> None:
    import io as _io

    buf = _io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    atomic_write_bytes(path, buf.getvalue())


def _load_host(path, fold_gains: bool = False):
    from .toy import load_lm

    lm = load_lm(path)
    return lm.fold_rms_gains() if fold_gains else lm


def _local_batches(paths, batch_size, norm, world, targets=None):
    """Endless epochs over local shards in the same order a client of ``world`` servers sees."""
    from .server import interleaved_order, slice_bounds

    ds = ShardDataset(paths)
    tg = ShardDataset(targets) if targets else None
    if tg is not None and tg.total_rows != ds.total_rows:
        raise ValueError("input and target shards differ in length")
    total = ds.num_batches(batch_size)
    bounds = [slice_bounds(total, r, world) for r in range(world)]
    order = [bounds[r][0] + i for r, i in interleaved_order([b - a for a, b in bounds])]
    if not order:
        raise ValueError(f"shards hold fewer than {batch_size} rows")
    while True:
        for k in order:
            x = ds.batch(k, batch_size, norm)
            yield x if tg is None else (x, tg.batch(k, batch_size, norm))


def _server_batches(addresses, trainer_id):
    from .server import BatchClient

    while True:
        with BatchClient(addresses, trainer_id) as client:
            got = False
            for batch in client:
                got = True
                yield batch
        if not got:
            raise ValueError("servers returned an empty epoch")


def _plan_from(cfg: dict) -> TrainPlan:
    return TrainPlan(**{f.name: cfg[f.name] for f in fields(TrainPlan)})


# --- individual commands --------------------------------------------------

GEN_KEYS = {
    "out": Key(Path, help="output .npy token file"),
    "seed": Key(int, help="sampling seed"),
    "source_seed": Key(int, 0, "seed of the Markov source (shared by train/eval corpora)"),
    "num_seqs": Key(int, 4000),
    "seq_len": Key(int, 64),
    "n_symbols": Key(int, 64),
    "concentration": Key(float, 0.05),
    "second_order_weight": Key(float, 0.5),
}


@command("gen-corpus", GEN_KEYS, "sample a synthetic Markov corpus")
def cmd_gen_corpus(cfg):
    from .toy import MarkovSource, generate_corpus

    src = MarkovSource.random(cfg["n_symbols"], cfg["source_seed"], cfg["concentration"], cfg["second_order_weight"])
    tokens = generate_corpus(src, cfg["num_seqs"], cfg["seq_len"], cfg["seed"])
    _save_npy(cfg["out"], tokens)
    return cfg["out"], [cfg["out"]]


HOST_KEYS = {
    "corpus": Key(Path), "out": Key(Path), "seed": Key(int),
    "steps": Key(int, 600), "batch_size": Key(int, 32), "lr": Key(float, 3e-3),
    "n_layers": Key(int, 2), "d_model": Key(int, 64), "n_heads": Key(int, 4), "head_dim": Key(int, 16),
    "d_mlp": Key(int, 256), "vocab": Key(int, 67),
}


@command("train-host", HOST_KEYS, "train the toy transformer host")
def cmd_train_host(cfg):
    import torch

    from .toy import ToyConfig, save_lm, train_toy_lm

    torch.set_num_threads(1)  # fixed reduction order across machines
    corpus = load_corpus(cfg["corpus"])
    tc = ToyConfig(cfg["n_layers"], cfg["d_model"], cfg["n_heads"], cfg["head_dim"], cfg["d_mlp"], cfg["vocab"],
                   corpus.shape[1])
    if corpus.max() >= tc.vocab:
        raise ConfigError(f"corpus token {int(corpus.max())} outside vocab {tc.vocab}")
    lm = train_toy_lm(corpus, cfg["steps"], cfg["seed"], tc, cfg["batch_size"], cfg["lr"])
    save_lm(lm, cfg["out"])
    return cfg["out"], [cfg["out"]]


COLLECT_KEYS = {
    "host": Key(Path), "corpus": Key(Path), "out": Key(Path, help="output directory"),
    "sites": Key(lambda s: [parse_site(x) for x in _list(s)], help="site:layer list"),
    "seed": Key(int, help="recorded; collection itself is deterministic"),
    "model": Key(str, "toy"), "corpus_tag": Key(str, ""), "num_seqs": Key(int, 0, "0 = all"),
    "batch_seqs": Key(int, 16), "max_bytes": Key(int, 64 << 20), "fold_rms_gains": Key(_bool, False),
}


@command("collect", COLLECT_KEYS, "capture host activations into shards")
def cmd_collect(cfg):
    from .store import collect

    host = _load_host(cfg["host"], cfg["fold_rms_gains"])
    corpus = load_corpus(cfg["corpus"])
    if cfg["num_seqs"]:
        corpus = corpus[: cfg["num_seqs"]]
    out = cfg["out"]
    out.mkdir(parents=True, exist_ok=True)
    written = collect(host, corpus, cfg["sites"], out, cfg["model"], cfg["corpus_tag"], cfg["batch_seqs"],
                      cfg["max_bytes"])
    paths = [p for ps in written.values() for p in ps]
    return out, paths


NORM_KEYS = {"shards": Key(str), "out": Key(Path), "site": Key(parse_site, None), "sample_count": Key(int, 100_000)}


@command("estimate-norm", NORM_KEYS, "estimate the input scaling constant")
def cmd_estimate_norm(cfg):
    from .standardize import estimate_norm_constant
    from .store import iter_row_blocks

    nc = estimate_norm_constant(iter_row_blocks(find_shards(cfg["shards"], cfg["site"])), cfg["sample_count"])
    atomic_write_text(cfg["out"], dump_kv({"c": nc.c, "sample_count": nc.sample_count}))
    return cfg["out"], [cfg["out"]]


SHUFFLE_KEYS = {"shards": Key(str), "out": Key(Path), "seed": Key(int), "bucket_size": Key(int, 1_000_000)}


@command("shuffle", SHUFFLE_KEYS, "bucketed shuffle of each shard set")
def cmd_shuffle(cfg):
    from .store import read_header, shuffle_buckets

    paths = find_shards(cfg["shards"])
    groups: dict = {}
    for p in paths:
        groups.setdefault(read_header(p).site_spec, []).append(p)
    out = cfg["out"]
    written = []
    for spec in sorted(groups, key=lambda s: (s.site, s.layer)):
        written += shuffle_buckets(groups[spec], out, cfg["bucket_size"], cfg["seed"])
    return out, written


SERVE_KEYS = {
    "shards": Key(str), "site": Key(parse_site, None), "norm": Key(str, "1.0"), "batch_size": Key(int, 256),
    "rank": Key(int, 0), "world": Key(int, 1), "host": Key(str, "127.0.0.1"), "port": Key(int, 0),
    "capacity": Key(int, 16), "prefetch": Key(int, 4), "replay_capacity": Key(int, 4),
    "port_file": Key(str, ""), "duration": Key(float, 0.0, "seconds to serve; 0 = forever"),
}


@command("serve", SERVE_KEYS, "serve one slice of shard batches over TCP")
def cmd_serve(cfg):
    import time

    from .server import BatchServer, BatchSource

    src = BatchSource(find_shards(cfg["shards"], cfg["site"]), cfg["batch_size"], read_norm(cfg["norm"]),
                      cfg["rank"], cfg["world"])
    srv = BatchServer(src, cfg["host"], cfg["port"], cfg["capacity"], cfg["prefetch"], cfg["replay_capacity"])
    host, port = srv.address
    if cfg["port_file"]:
        atomic_write_text(cfg["port_file"], f"{port}\n")
    print(f"serving {src.num_batches} batches on {host}:{port}", flush=True)
    srv.start()
    try:
        if cfg["duration"] > 0:
            time.sleep(cfg["duration"])
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        srv.stop()
    return None, []


TRAIN_KEYS = {
    "out": Key(Path, help="checkpoint path"),
    "shards": Key(str, "", "input shards (dir, glob or list)"),
    "targets": Key(str, "", "target shards for transcoders"),
    "servers": Key(str, "", "host:port list ordered by rank; replaces shards"),
    "site": Key(parse_site, None), "target_site": Key(parse_site, None),
    "norm": Key(str, help="constant or estimate-norm output"),
    "world": Key(int, 1, "server count whose interleave local reads mirror"),
    "trainer_id": Key(int, 0), "log_every": Key(int, 0),
    **_plan_keys(),
}


def _train_one(cfg: dict, out: Path):
    from .trainer import save_checkpoint, train

    plan = _plan_from(cfg)
    c = read_norm(cfg["norm"])
    if cfg["servers"]:
        if plan.kind == "transcoder":
            raise ConfigError("servers serve a single site; train transcoders from local shards")
        batches = _server_batches(_list(cfg["servers"]), cfg["trainer_id"])
        if cfg["norm"] not in ("1", "1.0"):
            log.info("server batches are scaled by the server; norm is only recorded")
        n = None
    else:
        if not cfg["shards"]:
            raise ConfigError("train needs 'shards' or 'servers'")
        paths = find_shards(cfg["shards"], cfg["site"])
        targets = None
        if plan.kind == "transcoder":
            if not cfg["targets"]:
                raise ConfigError("transcoder training needs 'targets'")
            targets = find_shards(cfg["targets"], cfg["target_site"])
        batches = _local_batches(paths, plan.batch_size, c, cfg["world"], targets)
        n = ShardDataset(paths).n
    if n is None:
        first = next(batches)
        n = first.shape[1]
        batches = _chain(first, batches)
    params, metrics = train(plan, batches, n, log_every=cfg["log_every"])
    save_checkpoint(out, params.astype(np.float32), plan, plan.total_steps, c)
    return params, metrics


def _chain(first, rest):
    yield first
    yield from rest


@command("train", TRAIN_KEYS, "train one SAE or transcoder")
def cmd_train(cfg):
    from .trainer import sidecar_path

    out = cfg["out"]
    _train_one(cfg, out)
    return out, [out, sidecar_path(out)]


SWEEP_KEYS = {k: v for k, v in TRAIN_KEYS.items() if k not in ("lambda_final",)}
SWEEP_KEYS.update({
    "out": Key(Path, help="output directory"),
    "lambdas": Key(lambda s: [float(x) for x in _list(s)]),
    "eval_rows": Key(int, 20000, "rows of the training shards used for L0/FVU"),
})


@command("sweep", SWEEP_KEYS, "train over a grid of sparsity coefficients")
def cmd_sweep(cfg):
    from .metrics import fvu, mean_l0
    from .standardize import raw_transform
    from .trainer import load_checkpoint, sidecar_path

    out = cfg["out"]
    out.mkdir(parents=True, exist_ok=True)
    if not cfg["shards"]:
        raise ConfigError("sweep evaluates on local shards; set 'shards'")
    inputs = ShardDataset(find_shards(cfg["shards"], cfg["site"]))
    rows = inputs.read_rows(0, min(cfg["eval_rows"], inputs.total_rows))
    if cfg["kind"] == "transcoder":
        tg = ShardDataset(find_shards(cfg["targets"], cfg["target_site"]))
        targets = tg.read_rows(0, rows.shape[0])
    else:
        targets = rows
    c = read_norm(cfg["norm"])
    lines = ["lambda\tmean_l0\tfvu\tcheckpoint"]
    artifacts = []
    for lam in cfg["lambdas"]:
        ckpt = out / f"sae_lambda_{lam:g}.jsae"
        one = dict(cfg, lambda_final=lam, out=ckpt)
        one.pop("lambdas"), one.pop("eval_rows")
        plain = {k: _plain(v) for k, v in one.items()}
        if not up_to_date(ckpt, "train", plain):  # finished points are skipped on resume
            _train_one(one, ckpt)
            write_manifest(ckpt, "train", plain, [ckpt, sidecar_path(ckpt)])
        params, _ = load_checkpoint(ckpt)
        l0 = mean_l0(params, [rows / np.float32(c)])
        fv = fvu(raw_transform(params, c), [rows], [targets])
        lines.append(f"{lam!r}\t{l0!r}\t{fv!r}\t{ckpt.name}")
        artifacts += [ckpt, sidecar_path(ckpt)]
    table = out / "sweep.tsv"
    atomic_write_text(table, "\n".join(lines) + "\n")
    return out, artifacts + [table]


FOLD_KEYS = {"checkpoint": Key(Path), "out": Key(Path), "norm": Key(str, "", "default: checkpoint metadata")}


@command("fold", FOLD_KEYS, "fold the scaling constant into an SAE for raw inputs")
def cmd_fold(cfg):
    from .standardize import fold_parameters
    from .trainer import load_checkpoint, sidecar_path

    params, meta = load_checkpoint(cfg["checkpoint"])
    if cfg["norm"]:
        c = read_norm(cfg["norm"])
    elif "norm_constant" in meta:
        c = meta["norm_constant"]
    else:
        raise ConfigError("checkpoint has no norm_constant; pass 'norm'")
    folded = fold_parameters(params.astype(np.float64), c).astype(np.float32)
    save_params(folded, cfg["out"])
    meta = dict(meta, parameterization=INFERENCE, folded_from=Path(cfg["checkpoint"]).name, norm_constant=c)
    atomic_write_text(sidecar_path(cfg["out"]), dump_kv(meta))
    return cfg["out"], [cfg["out"], sidecar_path(cfg["out"])]


EVAL_KEYS = {
    "checkpoint": Key(Path), "host": Key(Path), "corpus": Key(Path), "site": Key(parse_site),
    "out": Key(Path, help="report path (key=value); plot data goes alongside"),
    "norm": Key(str, "", "default: checkpoint metadata (training parameterization only)"),
    "num_seqs": Key(int, 256), "precision": Key(str, "fp32"),
    "freq_corpus": Key(str, ""), "freq_seqs": Key(int, 1000),
    "attribution_seqs": Key(int, 0, "sequences for r_L0; 0 disables"),
    "extra_corpora": Key(str, "", "tag:path list for per-corpus breakdowns"),
    "fold_rms_gains": Key(_bool, False),
}


@command("eval", EVAL_KEYS, "evaluate an SAE spliced into the host")
def cmd_eval(cfg):
    from .metrics import evaluate_sae, histogram_table
    from .trainer import load_checkpoint

    params, meta = load_checkpoint(cfg["checkpoint"])
    norm = None
    if params.parameterization != INFERENCE:
        if cfg["norm"]:
            norm = read_norm(cfg["norm"])
        elif "norm_constant" in meta:
            norm = meta["norm_constant"]
        else:
            raise ConfigError("training-parameterized checkpoint needs 'norm'")
    host = _load_host(cfg["host"], cfg["fold_rms_gains"])
    seqs = load_corpus(cfg["corpus"])[: cfg["num_seqs"]]
    freq = None
    if cfg["freq_corpus"]:
        freq = load_corpus(cfg["freq_corpus"])[: cfg["freq_seqs"]]
    attr = seqs[: cfg["attribution_seqs"]] if cfg["attribution_seqs"] else None
    extra = {}
    for item in _list(cfg["extra_corpora"]):
        tag, _, path = item.partition(":")
        extra[tag] = load_corpus(path)[: cfg["num_seqs"]]
    md = {"parameterization": params.parameterization}
    if "plan.lambda_final" in meta:
        md["lambda"] = float(meta["plan.lambda_final"])
    report = evaluate_sae(host, params.astype(np.float64), cfg["site"], seqs, norm, cfg["precision"], freq, attr,
                          extra, md)
    out = cfg["out"]
    positions = out.with_name(out.stem + "_positions.tsv")
    atomic_write_text(out, report.to_kv())
    atomic_write_text(positions, report.position_table())
    arts = [out, positions]
    if report.histogram is not None:
        hist = out.with_name(out.stem + "_frequencies.tsv")
        atomic_write_text(hist, histogram_table(report.histogram))
        arts.append(hist)
    return out, arts


REPORT_KEYS = {"reports": Key(str, help="eval reports (files, globs or list)"), "out": Key(Path)}


@command("report", REPORT_KEYS, "tabulate eval reports as plot data")
def cmd_report(cfg):
    paths = []
    for part in _list(cfg["reports"]):
        paths += sorted(glob.glob(part)) if any(ch in part for ch in "*?[") else [part]
    if not paths:
        raise FileNotFoundError(f"no reports match {cfg['reports']!r}")
    rows = []
    for p in paths:
        r = read_kv(p)
        rows.append((float(r.get("lambda", "nan")), r.get("site", ""), r.get("layer", ""), r.get("precision", ""),
                     float(r["mean_l0"]), float(r["delta_loss"]), float(r["fvu"]), Path(p).name))
    rows.sort(key=lambda r: (r[1], r[2], r[3], r[0]))
    lines = ["lambda\tsite\tlayer\tprecision\tmean_l0\tdelta_loss\tfvu\treport"]
    lines += ["\t".join(repr(v) if isinstance(v, float) else str(v) for v in r) for r in rows]
    atomic_write_text(cfg["out"], "\n".join(lines) + "\n")
    return cfg["out"], [cfg["out"]]


# --- entry point ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jumpsae", description="JumpReLU SAE training and evaluation toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, keys, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value settings file")
        p.add_argument("--force", action="store_true", help="rerun even if the manifest is current")
        for key, spec in keys.items():
            if spec.default is REQUIRED:
                req = " (required)"
            else:
                req = f" (default {_plain(spec.default)!s})" if spec.default not in (None, "") else ""
            p.add_argument(f"--{key.replace('_', '-')}", dest=f"opt_{key}", metavar="VALUE",
                           help=(spec.help or key) + req)
        p.add_argument("settings", nargs="*", metavar="key=value")
    return parser


def _raw_settings(args, keys) -> dict[str, str]:
    raw: dict[str, str] = {}
    if args.config:
        raw.update(parse_kv(Path(args.config).read_text(), args.config))
    for key in keys:
        v = getattr(args, f"opt_{key}")
        if v is not None:
            raw[key] = v
    for item in args.settings:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip().replace("-", "_")] = v.strip()
    return raw


def _plain(value):
    if isinstance(value, SiteSpec):
        return f"{value.site}:{value.layer}"
    if isinstance(value, list):
        return ",".join(str(_plain(v)) for v in value)
    if isinstance(value, Path):
        return str(value)
    return value


def run(name: str, raw: dict[str, str], force: bool = False) -> int:
    fn, keys, _ = COMMANDS[name]
    cfg = resolve(keys, raw)
    manifest_cfg = {k: _plain(v) for k, v in cfg.items()}
    out = cfg.get("out")
    if out is not None and not force and up_to_date(Path(out), name, manifest_cfg):
        log.info("%s: %s is up to date", name, out)
        return EXIT_OK
    out, artifacts = fn(cfg)
    if out is not None:
        write_manifest(Path(out), name, manifest_cfg, [Path(a) for a in artifacts])
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    keys = COMMANDS[args.command][1]
    try:
        raw = _raw_settings(args, keys)
        return run(args.command, raw, args.force)
    except (ConfigError, KeyError) as exc:
        msg = exc.args[0] if exc.args else exc
        print(f"jumpsae {args.command}: config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"jumpsae {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ShardFormatError, ParamFormatError) as exc:
        print(f"jumpsae {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"jumpsae {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
