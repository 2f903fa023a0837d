"""``tegaarec`` command line: synth, prepare, train, grid, evaluate, recommend, popularity.

Settings come from (lowest to highest precedence) built-in defaults, the
config stored in a checkpoint (for evaluate/recommend), a flat ``key = value``
config file given with ``--config``, and ``--key value`` flags.

Exit codes: 0 ok, 2 user error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .masking import MaskedBatch, pad_rows
from .metrics import evaluate, training_instances_as_eval
from .model import CheckpointError, OracleModel, load_model, read_checkpoint, save_checkpoint, save_model
from .neighbours import ItemUserIndex, build_sample
from .numerics import AdamState, NumericError
from .synth import SynthSpec, generate
from .trainer import TrainConfig, TrainerState, TrainReport, fit, grid_search, popularity_baseline

EXIT_USER, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
ABLATIONS = ("no_lmp", "no_sf", "no_gal", "with_pe", "no_uli", "no_ali")

log = logging.getLogger("tegaarec")


class UserError(ValueError):
    pass


# ---------------------------------------------------------------- settings

RUN_FIELDS = {
    "events": str, "edges": str, "workdir": str, "out": str, "holdout_weeks": int, "split_seed": int,
    "checkpoint": str, "split": str, "k": int, "user": str, "items": str, "dump": str,
}


def _field_types() -> dict[str, type]:
    types = dict(RUN_FIELDS)
    for f in dataclasses.fields(TrainConfig):
        types[f.name] = tuple if f.name.startswith("grid_") else type(f.default)
    for f in dataclasses.fields(SynthSpec):
        types["synth_seed" if f.name == "seed" else f.name] = type(f.default)
    return types


FIELD_TYPES = _field_types()


def parse_value(key: str, text: str):
    kind = FIELD_TYPES.get(key)
    if kind is None:
        raise UserError(f"unknown setting {key!r}")
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("1", "true", "yes", "on")
        if kind is tuple:
            return tuple(float(x) if any(c in x for c in ".e") else int(x)
                         for x in text.replace(",", " ").split())
        return kind(text)
    except ValueError:
        raise UserError(f"bad value for {key}: {text!r}") from None


def read_config_file(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UserError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UserError(f"{path} line {lineno}: expected key = value")
        key, val = (x.strip() for x in line.split("=", 1))
        out[key] = parse_value(key, val)
    return out


def settings(args) -> dict:
    merged = read_config_file(args.config) if getattr(args, "config", None) else {}
    for key in FIELD_TYPES:
        if key in vars(args):
            merged[key] = getattr(args, key)
    for flag in getattr(args, "ablation", None) or ():
        merged[flag] = True
    if merged.get("no_ali"):
        merged["no_uli"] = True
    return merged


def train_config(base: dict, overrides: dict) -> TrainConfig:
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    merged = {**base, **{k: v for k, v in overrides.items() if k in known}}
    try:
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as e:
        raise UserError(str(e)) from None


def synth_spec(opts: dict) -> SynthSpec:
    kw = {}
    for f in dataclasses.fields(SynthSpec):
        key = "synth_seed" if f.name == "seed" else f.name
        if key in opts:
            kw[f.name] = opts[key]
    try:
        return SynthSpec(**kw)
    except ValueError as e:
        raise UserError(str(e)) from None


def require(opts: dict, key: str):
    if opts.get(key) in (None, ""):
        raise UserError(f"missing required setting --{key}")
    return opts[key]


# ---------------------------------------------------------------- workdir io

def write_workdir(workdir: Path, split: D.DatasetSplit, umap: D.IdMap, imap: D.IdMap, meta: dict) -> None:
    workdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in split.train.all_sessions():
        rows.append((s.owner, s.index, s.week, "train", s.items))
    for inst in split.valid + split.test:
        s = inst.session
        rows.append((s.owner, s.index, s.week, inst.split, s.items))
    rows.sort(key=lambda r: (r[0], r[1]))
    (workdir / "sessions.tsv").write_text(
        "".join(f"{u}\t{t}\t{w}\t{tag}\t{','.join(map(str, items))}\n" for u, t, w, tag, items in rows))
    (workdir / "edges.tsv").write_text("".join(f"{a}\t{b}\n" for a, b in sorted(split.train.edges)))
    (workdir / "users.tsv").write_text("".join(f"{d}\t{r}\n" for r, d in sorted(umap.to_dense.items(), key=lambda x: x[1])))
    (workdir / "items.tsv").write_text("".join(f"{d}\t{r}\n" for r, d in sorted(imap.to_dense.items(), key=lambda x: x[1])))
    raw_user = umap.to_raw
    (workdir / "manifest.tsv").write_text("".join(
        f"{raw_user[inst.user]}\t{inst.session.index}\t{inst.split}\n"
        for inst in sorted(split.valid + split.test, key=lambda i: (i.user, i.session.index))))
    (workdir / "prepare.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def read_workdir(workdir) -> tuple[D.DatasetSplit, D.IdMap, D.IdMap]:
    workdir = Path(workdir)
    if not (workdir / "sessions.tsv").is_file():
        raise UserError(f"{workdir} is not a prepared workdir (run `tegaarec prepare` first)")
    meta = json.loads((workdir / "prepare.json").read_text())
    train: dict[int, list[D.Session]] = {}
    valid, test = [], []
    for line in (workdir / "sessions.tsv").read_text().splitlines():
        u, t, w, tag, items = line.split("\t")
        s = D.Session(int(u), int(t), tuple(int(x) for x in items.split(",")), int(w))
        if tag == "train":
            train.setdefault(s.owner, []).append(s)
        else:
            (valid if tag == "valid" else test).append(D.EvalInstance(s.owner, s, tag))
    edges = frozenset(tuple(map(int, line.split("\t"))) for line in (workdir / "edges.tsv").read_text().splitlines())
    store = D.SessionStore({u: tuple(ss) for u, ss in train.items()}, edges)
    umap = D.IdMap({int(r): int(d) for d, r in (l.split("\t") for l in (workdir / "users.tsv").read_text().splitlines())})
    imap = D.IdMap({int(r): int(d) for d, r in (l.split("\t") for l in (workdir / "items.tsv").read_text().splitlines())})
    split = D.DatasetSplit(store, valid, test, meta["holdout_weeks"], meta["cutoff_week"])
    return split, umap, imap


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- commands

def cmd_synth(opts: dict) -> int:
    spec = synth_spec(opts)
    out = Path(require(opts, "out"))
    out.mkdir(parents=True, exist_ok=True)
    data = generate(spec)
    (out / "events.tsv").write_text(data.events_tsv)
    (out / "edges.tsv").write_text(data.edges_tsv)
    (out / "clusters.tsv").write_text(data.clusters_tsv)
    (out / "synth.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=1) + "\n")
    print(f"wrote {out}/events.tsv ({data.events_tsv.count(chr(10))} events), "
          f"edges.tsv ({data.edges_tsv.count(chr(10))} edges), clusters.tsv")
    return 0


def cmd_prepare(opts: dict) -> int:
    events_path = Path(require(opts, "events"))
    edges_path = opts.get("edges")
    if not events_path.is_file():
        raise UserError(f"events file not found: {events_path}")
    if edges_path and not Path(edges_path).is_file():
        raise UserError(f"edges file not found: {edges_path}")
    workdir = Path(require(opts, "workdir"))
    holdout = int(opts.get("holdout_weeks", 26))
    seed = int(opts.get("split_seed", 0))
    ev_text = events_path.read_text(encoding="utf-8")
    ed_text = Path(edges_path).read_text(encoding="utf-8") if edges_path else ""
    events, edges = D.parse_events(ev_text, ed_text, source=str(events_path))
    store = D.segment_weekly(events, edges)
    split, umap, imap = D.reindex_split(D.split_holdout(store, holdout, seed))
    n_eval_events = sum(len(i.session) for i in split.valid + split.test)
    stats = D.store_stats(split.train, n_eval_events)
    stats.update({"valid_sessions": len(split.valid), "test_sessions": len(split.test)})
    write_workdir(workdir, split, umap, imap, {
        "holdout_weeks": holdout, "split_seed": seed, "cutoff_week": split.cutoff_week,
        "events": str(events_path), "edges": str(edges_path or ""), "stats": stats})
    width = max(len(k) for k in stats)
    print("\n".join(f"{k:<{width}}  {v:.2f}" if isinstance(v, float) else f"{k:<{width}}  {v}"
                    for k, v in stats.items()))
    print(f"manifest sha256 {sha256(workdir / 'manifest.tsv')}")
    return 0


def _state_arrays(state: TrainerState) -> tuple[dict, dict]:
    arrays = {f"param.{k}": v for k, v in state.model.state().items()}
    for k in state.model.params:
        if k in state.adam.m:
            arrays[f"adam_m.{k}"] = state.adam.m[k]
            arrays[f"adam_v.{k}"] = state.adam.v[k]
    if state.best_state is not None:
        arrays.update({f"best.{k}": v for k, v in state.best_state.items()})
    meta = dict(state.model.meta())
    meta.update({"adam_step": state.adam.step, "global_step": state.global_step, "epoch": state.epoch,
                 "bad_epochs": state.bad_epochs, "report": state.report.to_lines()})
    return arrays, meta


def _load_state(path: Path, split, config: TrainConfig, n_users: int, n_items: int) -> TrainerState:
    meta, arrays = read_checkpoint(path)
    model, _, _ = load_model(path, n_users, n_items)
    adam = AdamState(config.beta1, config.beta2, config.eps, meta["adam_step"])
    for k in model.params:
        if f"adam_m.{k}" in arrays:
            adam.m[k] = arrays[f"adam_m.{k}"]
            adam.v[k] = arrays[f"adam_v.{k}"]
    best = {k[5:]: v for k, v in arrays.items() if k.startswith("best.")} or None
    report = TrainReport.from_lines(meta["report"])
    if report.stop_reason == "max_epochs":
        report.stop_reason = ""
    return TrainerState(model, adam, meta["global_step"], meta["epoch"], best, meta["bad_epochs"], report)


def cmd_train(opts: dict) -> int:
    workdir = Path(require(opts, "workdir"))
    split, umap, imap = read_workdir(workdir)
    config = train_config({}, opts)
    state_path = workdir / "state.ckpt"
    state = None
    if opts.get("resume") and state_path.is_file():
        state = _load_state(state_path, split, config, len(umap), len(imap))
        state.report.config = config.to_dict()
        log.info("resuming after epoch %d", state.epoch)

    def checkpoint_state(st: TrainerState):
        arrays, meta = _state_arrays(st)
        save_checkpoint(state_path, arrays, meta)

    state = fit(split, config, state, on_epoch=checkpoint_state, n_users=len(umap), n_items=len(imap))
    save_model(workdir / "model.ckpt", state.model, extra_meta={"train_config": config.to_dict()})
    (workdir / "report.jsonl").write_text("\n".join(state.report.to_lines()) + "\n")
    rep = state.report
    print(f"epochs {state.epoch}  best epoch {rep.best_epoch}  valid R@20 {100 * max(rep.best_recall20, 0):.2f}"
          f"  stop {rep.stop_reason}")
    print(f"ablations: {', '.join(a for a in ABLATIONS if getattr(config, a)) or 'none'}")
    return 0


def cmd_grid(opts: dict) -> int:
    workdir = Path(require(opts, "workdir"))
    split, umap, imap = read_workdir(workdir)
    config = train_config({}, opts)
    best, cells = grid_search(split, config, n_users=len(umap), n_items=len(imap))
    out = workdir / "grid"
    out.mkdir(exist_ok=True)
    for cell in cells:
        (out / f"cell_{cell.index:03d}.jsonl").write_text("\n".join(cell.report.to_lines()) + "\n")
    (out / "best.json").write_text(json.dumps({"cell": best.index, "config": best.config.to_dict(),
                                                "valid_recall20": best.report.best_recall20,
                                                "valid_ndcg20": best.report.best_ndcg20},
                                               sort_keys=True, indent=1) + "\n")
    print(f"{len(cells)} cells; best cell {best.index} valid R@20 {100 * best.report.best_recall20:.2f}")
    return 0


def _model_and_config(opts: dict, workdir: Path, n_users: int, n_items: int):
    ckpt = Path(opts.get("checkpoint") or workdir / "model.ckpt")
    if not ckpt.is_file():
        raise UserError(f"checkpoint not found: {ckpt}")
    model, meta, _ = load_model(ckpt, n_users if meta_kind(ckpt) == "tegaarec" else None, n_items)
    return model, train_config(meta.get("train_config", {}), opts)


def meta_kind(path: Path) -> str:
    return read_checkpoint(path)[0].get("model", "")


def cmd_evaluate(opts: dict) -> int:
    workdir = Path(require(opts, "workdir"))
    split, umap, imap = read_workdir(workdir)
    model, config = _model_and_config(opts, workdir, len(umap), len(imap))
    which = opts.get("split", "test")
    if which == "train":
        instances = training_instances_as_eval(split.train)
    elif which in ("valid", "test"):
        instances = getattr(split, which)
    else:
        raise UserError(f"--split must be train, valid or test, got {which!r}")
    dump = [] if opts.get("dump") else None
    res = evaluate(instances, model, split.train, None, config.sampler_config(), config.eval_seed,
                   eval_prefixes=config.eval_prefixes, dump=dump)
    (workdir / f"eval_{which}.tsv").write_text(res.tsv_header() + "\n" + res.tsv_row(which) + "\n")
    if dump is not None:
        Path(opts["dump"]).write_text("".join(
            f"{pos}\t{k}\t{t}\t{','.join(repr(float(x)) for x in s)}\n" for pos, k, t, s in dump))
    print(res.summary(f"{which} split"))
    return 0


def cmd_recommend(opts: dict) -> int:
    workdir = Path(require(opts, "workdir"))
    split, umap, imap = read_workdir(workdir)
    model, config = _model_and_config(opts, workdir, len(umap), len(imap))
    user_tok = str(require(opts, "user")).strip()
    if not user_tok.isdigit() or int(user_tok) not in umap.to_dense:
        raise UserError(f"unknown user id {user_tok}")
    raw_user = int(user_tok)
    items = []
    for tok in str(require(opts, "items")).replace(",", " ").split():
        if not tok.isdigit() or int(tok) not in imap.to_dense:
            raise UserError(f"unknown item id {tok}")
        items.append(imap.to_dense[int(tok)])
    recs = recommend(model, split, umap.to_dense[raw_user], items, config, int(opts.get("k", 20)))
    to_raw = imap.to_raw
    sys.stdout.write("".join(f"{raw_user}\t{r}\t{to_raw[i]}\t{s:.6f}\n" for r, (i, s) in enumerate(recs, 1)))
    return 0


def recommend(model, split: D.DatasetSplit, user: int, items: list[int], config: TrainConfig, k: int):
    """Top-k (item, score) for ``items`` treated as the whole current prefix."""
    index = ItemUserIndex.build(split.train)
    sampler = config.sampler_config()
    sample = build_sample(split.train, index, user, items, split.cutoff_week + 1, sampler.L_l, sampler.L_s,
                          np.random.default_rng([config.eval_seed, user]), use_lmp=sampler.use_lmp,
                          use_friends=sampler.use_friends, volume_weighted=sampler.volume_weighted,
                          neighbour_history=sampler.neighbour_history, max_len=sampler.max_len)
    ids, lengths = pad_rows([items], sampler.max_len)
    batch = MaskedBatch(ids, lengths, np.zeros(1, dtype=np.int64), np.array([user]), [sample])
    scores = model.scores(batch)[0]
    order = np.lexsort((np.arange(len(scores)), -scores))[:k]
    return [(int(j) + 1, float(scores[j])) for j in order]


def cmd_popularity(opts: dict) -> int:
    workdir = Path(require(opts, "workdir"))
    split, umap, imap = read_workdir(workdir)
    out = Path(opts.get("checkpoint") or workdir / "popularity.ckpt")
    save_model(out, popularity_baseline(split, len(imap)))
    print(f"wrote {out}")
    return 0


def write_oracle_checkpoint(path, n_items: int) -> None:
    save_model(path, OracleModel(n_items))


COMMANDS = {
    "synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train, "grid": cmd_grid,
    "evaluate": cmd_evaluate, "recommend": cmd_recommend, "popularity": cmd_popularity,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tegaarec", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-v", "--verbose", action="store_true")
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--ablation", action="append", choices=ABLATIONS, help="repeatable")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from workdir/state.ckpt")
        for key, kind in FIELD_TYPES.items():
            flags = ["--" + key.replace("_", "-")]
            if not key.islower():
                flags.append("--" + key)  # --L_l reads better than --L-l
            p.add_argument(*flags, dest=key, default=argparse.SUPPRESS, metavar=kind.__name__.upper(),
                           type=lambda text, key=key: parse_value(key, text))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        opts = settings(args)
        if getattr(args, "resume", False):
            opts["resume"] = True
        return COMMANDS[args.command](opts)
    except (UserError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except (D.IngestError, D.ConfigError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
