"""Command-line runner: generate, train, eval-pose, eval-retrieval, embed.

Configuration comes from an INI file with sections [generate], [train], [eval]
and [paths]; every key also has a ``--key-name`` flag, and flags win.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import datetime
import json
import logging
import math
import os
import platform
import sys
from dataclasses import dataclass, field, fields

import numpy as np

from . import __version__
from . import neural as nn
from . import plots
from . import retrieval as rt
from .data import GenConfig, generate, holdout_split, read_dataset, write_dataset
from .errors import ConfigError, MCSSError
from .geometry import canonical_transform_batch
from .metrics import mpjpe, n_mpjpe, pa_mpjpe
from .training import TargetNormalizer, TrainConfig, canonical_targets, predict_canonical, train


@dataclass(frozen=True)
class EvalConfig:
    k: tuple = (1, 5, 10, 20)
    filter: str = "cross-view"
    bins: int = 10
    n_queries: int = 0        # 0 = every index entry
    corr_queries: int = 200
    split: str = "val"        # val | all
    oracle_only: bool = False
    plots: bool = False

    def validate(self):
        if not self.k or min(self.k) < 1:
            raise ConfigError("k: need at least one K >= 1")
        if self.filter not in rt.FILTERS:
            raise ConfigError(f"filter: expected one of {', '.join(rt.FILTERS)}")
        if self.bins < 1:
            raise ConfigError("bins: must be >= 1")
        if self.n_queries < 0 or self.corr_queries < 1:
            raise ConfigError("n_queries: must be >= 0 (corr_queries >= 1)")
        if self.split not in ("val", "all"):
            raise ConfigError("split: expected val or all")


@dataclass(frozen=True)
class PathConfig:
    dataset: str = ""      # default <out>/dataset.ndjson
    checkpoint: str = ""   # default <out>/checkpoint.json
    out: str = "out"

    def validate(self):
        if not self.out:
            raise ConfigError("out: output directory must be set")

    @property
    def dataset_path(self):
        return self.dataset or os.path.join(self.out, "dataset.ndjson")

    @property
    def checkpoint_path(self):
        return self.checkpoint or os.path.join(self.out, "checkpoint.json")


@dataclass(frozen=True)
class RunConfig:
    generate: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def validate(self):
        for sec in SECTIONS:
            getattr(self, sec).validate()


SECTIONS = {"generate": GenConfig, "train": TrainConfig, "eval": EvalConfig, "paths": PathConfig}
# key -> section; keys are unique across sections so each gets one flag
KEY_SECTION = {f.name: sec for sec, cls in SECTIONS.items() for f in fields(cls)}
assert len(KEY_SECTION) == sum(len(fields(c)) for c in SECTIONS.values())

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(text)
            return low in _TRUE
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            v = float(text)
            if not math.isfinite(v):
                raise ValueError(text)
            return v
        if isinstance(default, tuple):
            return tuple(int(t) for t in text.split(",") if t.strip())
        return text
    except ValueError:
        kind = type(default).__name__ if not isinstance(default, tuple) else "comma-separated int list"
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _defaults(cls):
    return {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
            for f in fields(cls)}


def parse_config(path=None, overrides=None) -> RunConfig:
    """Resolve defaults < file < ``overrides`` ({key: raw string})."""
    raw = {sec: {} for sec in SECTIONS}
    if path:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            with open(path, encoding="utf-8") as f:
                cp.read_file(f)
        except OSError as e:
            raise ConfigError(f"config: cannot read {path}: {e}") from e
        except configparser.Error as e:
            raise ConfigError(f"config: malformed file {path}: {e}") from e
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise ConfigError(f"{sec}: unknown config section")
            for key, val in cp.items(sec):
                if KEY_SECTION.get(key) != sec:
                    raise ConfigError(f"{key}: unknown key in section [{sec}]")
                raw[sec][key] = val
    for key, val in (overrides or {}).items():
        if key not in KEY_SECTION:
            raise ConfigError(f"{key}: unknown key")
        raw[KEY_SECTION[key]][key] = val
    parts = {}
    for sec, cls in SECTIONS.items():
        vals = _defaults(cls)
        for key, text in raw[sec].items():
            vals[key] = _coerce(key, text, vals[key])
        parts[sec] = cls(**vals)
    cfg = RunConfig(**parts)
    cfg.validate()
    return cfg


def config_text(cfg: RunConfig) -> str:
    lines = []
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        part = getattr(cfg, sec)
        for f in fields(part):
            lines.append(f"{f.name} = {_format(getattr(part, f.name))}")
        lines.append("")
    return "\n".join(lines)


# -- io helpers ----------------------------------------------------------------

def _write(path, text):
    nn._atomic_write_text(path, text)


def _eval_split(ds, cfg: RunConfig):
    return holdout_split(ds, cfg.train.val_fraction)[1] if cfg.eval.split == "val" else ds


def _load_models(cfg: RunConfig):
    ck = nn.load_checkpoint(cfg.paths.checkpoint_path)
    norm = ck.extra.get("normalizer")
    norm = TargetNormalizer.from_dict(norm) if norm else TargetNormalizer.identity()
    return ck, norm


def pose_only_index(ds):
    """Index carrying poses only (constant embedding); enough for the oracle retriever."""
    order = np.lexsort((ds.frame, ds.view, ds.subject))
    emb = np.zeros((len(order), 1))
    emb[:, 0] = 1.0
    pose = np.array(ds.pose[order])
    canon = canonical_transform_batch(pose)[0] if len(pose) else pose.copy()
    return rt.EmbeddingIndex(emb, ds.subject[order], ds.view[order], ds.frame[order], pose, canon)


# -- commands ------------------------------------------------------------------

def cmd_generate(cfg: RunConfig):
    ds = generate(cfg.generate, cfg.train.seed)
    path = cfg.paths.dataset_path
    write_dataset(ds, path)
    return {"dataset": path, "records": len(ds)}


def cmd_train(cfg: RunConfig):
    ds = read_dataset(cfg.paths.dataset_path)
    res = train(ds, cfg.train)
    extra = {"normalizer": res.normalizer.to_dict(), "train_config": config_text(cfg)}
    nn.save_checkpoint(cfg.paths.checkpoint_path, encoder_spec=res.encoder_spec, encoder=res.encoder,
                       head_spec=res.head_spec, head=res.head, encoder_adam=res.encoder_adam,
                       head_adam=res.head_adam, epoch=res.epochs_done, rng_state=res.rng_state,
                       extra=extra)
    _write(os.path.join(cfg.paths.out, "train_log.csv"), res.log.to_csv())
    final = res.log.epochs[-1]["val_nmpjpe"] if res.log.epochs else None
    return {"checkpoint": cfg.paths.checkpoint_path, "val_nmpjpe": final}


POSE_COLUMNS = ("subject", "n_records", "mpjpe_mm", "n_mpjpe_mm", "pa_mpjpe_mm")


def cmd_eval_pose(cfg: RunConfig):
    ck, norm = _load_models(cfg)
    ds = _eval_split(read_dataset(cfg.paths.dataset_path), cfg)
    pred = predict_canonical(ck.encoder_spec, ck.encoder, ck.head_spec, ck.head, norm, ds.obs)
    gt = canonical_targets(ds)
    per = {"mpjpe_mm": mpjpe(pred, gt), "n_mpjpe_mm": n_mpjpe(pred, gt),
           "pa_mpjpe_mm": pa_mpjpe(pred, gt, check=False)}
    rows = []
    for sid in list(ds.subject_ids) + ["all"]:
        sel = np.ones(len(ds), bool) if sid == "all" else ds.subject == sid
        row = {"subject": sid, "n_records": int(sel.sum())}
        row.update({k: float(v[sel].mean()) if sel.any() else math.nan for k, v in per.items()})
        rows.append(row)
    _write(os.path.join(cfg.paths.out, "eval_pose.csv"), rt.rows_to_csv(rows, POSE_COLUMNS))
    return rows[-1]


def cmd_eval_retrieval(cfg: RunConfig):
    ev = cfg.eval
    ds = _eval_split(read_dataset(cfg.paths.dataset_path), cfg)
    if ev.oracle_only and not os.path.exists(cfg.paths.checkpoint_path):
        index = pose_only_index(ds)
    else:
        ck, _ = _load_models(cfg)
        index = rt.build_index(ds, ck.encoder_spec, ck.encoder)
    index.check()
    rng = np.random.default_rng(cfg.train.seed)
    queries = None
    if 0 < ev.n_queries < len(index):
        queries = np.sort(rng.choice(len(index), ev.n_queries, replace=False))
    run = rt.run_retrieval(index, queries, ev.k, ev.filter)
    rows = rt.report_rows(run, oracle_only=ev.oracle_only)
    out = cfg.paths.out
    _write(os.path.join(out, "retrieval.csv"), rt.report_csv(rows))
    if not ev.oracle_only:
        nb = ["query_subject,query_view,query_frame,neighbors"]
        for n, q in enumerate(run.queries):
            ids = ";".join(f"{index.subject[i]}:{index.view[i]}:{index.frame[i]}" for i in run.neighbors[n])
            nb.append(f"{index.subject[q]},{index.view[q]},{index.frame[q]},{ids}")
        _write(os.path.join(out, "neighbors.csv"), "\n".join(nb) + "\n")
        corr = rt.correlation_report(index, ev.corr_queries, ev.bins, rng)
        _write(os.path.join(out, "correlation.csv"), corr.to_csv())
    if ev.plots:
        ks = [r.K for r in rows]
        series = {"oracle": (ks, [r.oracle_pampjpe_mm for r in rows])}
        if not ev.oracle_only:
            series["model"] = (ks, [r.model_pampjpe_mm for r in rows])
        _write(os.path.join(out, "retrieval.svg"),
               plots.line_chart(series, f"Mean-PA-MPJPE@K ({ev.filter})", "K", "mm"))
        if not ev.oracle_only:
            mid = list(0.5 * (corr.edges[:-1] + corr.edges[1:]))
            _write(os.path.join(out, "correlation.svg"), plots.line_chart(
                {"same view": (mid, list(corr.mean_same)), "different view": (mid, list(corr.mean_diff))},
                "embedding distance vs pose difference", "MPJPE (mm)", "mean embedding distance"))
    return {r.K: r.delta_mm for r in rows}


def cmd_embed(cfg: RunConfig):
    ck, _ = _load_models(cfg)
    ds = _eval_split(read_dataset(cfg.paths.dataset_path), cfg)
    index = rt.build_index(ds, ck.encoder_spec, ck.encoder)
    head = ["subject", "view", "frame"] + [f"e{i}" for i in range(index.emb.shape[1])]
    lines = [",".join(head)]
    for i in range(len(index)):
        vals = ",".join(format(float(x), ".17g") for x in index.emb[i])
        lines.append(f"{index.subject[i]},{index.view[i]},{index.frame[i]},{vals}")
    path = os.path.join(cfg.paths.out, "embeddings.csv")
    _write(path, "\n".join(lines) + "\n")
    return {"embeddings": path, "rows": len(index)}


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval-pose": cmd_eval_pose,
            "eval-retrieval": cmd_eval_retrieval, "embed": cmd_embed}


# -- argument parsing ------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI config file")
    common.add_argument("-v", "--verbose", action="store_true")
    for sec, cls in SECTIONS.items():
        grp = common.add_argument_group(f"[{sec}]")
        for f in fields(cls):
            default = _defaults(cls)[f.name]
            grp.add_argument("--" + f.name.replace("_", "-"), dest=f.name, metavar="V",
                             help=f"default: {_format(default) or repr('')}")
    p = _Parser(prog="mcss", description="Multi-view consistent semi-supervised pose learning.")
    p.add_argument("--version", action="version", version=f"mcss {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def _metadata(command, argv, started):
    return {"command": command, "argv": list(argv), "version": __version__,
            "started": started, "finished": datetime.datetime.now().astimezone().isoformat(),
            "python": platform.python_version(), "numpy": np.__version__}


def run(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    started = datetime.datetime.now().astimezone().isoformat()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    overrides = {k: v for k, v in vars(args).items() if k in KEY_SECTION and v is not None}
    cfg = parse_config(args.config, overrides)
    os.makedirs(cfg.paths.out, exist_ok=True)
    _write(os.path.join(cfg.paths.out, f"{args.command}.config.ini"), config_text(cfg))
    summary = COMMANDS[args.command](cfg)
    _write(os.path.join(cfg.paths.out, f"{args.command}.meta.json"),
           json.dumps(_metadata(args.command, argv, started), indent=1) + "\n")
    print(json.dumps({"command": args.command, **{str(k): v for k, v in summary.items()}},
                     default=float))
    return 0


def main(argv=None):
    try:
        return run(argv)
    except MCSSError as e:
        print(json.dumps({"error": e.kind, "exit_code": e.exit_code, "message": str(e)}), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(json.dumps({"error": "io", "exit_code": 2, "message": str(e)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
