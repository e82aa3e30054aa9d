"""Command-line entry point: ``isvkit <verb> --config run.cfg [overrides]``.

Verbs: ``simulate``, ``train-frontend``, ``train-e2e``, ``train-backend``,
``evaluate``. Every run directory receives the resolved config
(``config.txt``), an append-only ``log.txt`` of ``key=value`` lines,
``metrics.txt`` and ``artifacts.txt`` (sha256 of each output file).

When no data files are configured, commands draw the synthetic world
described by the ``synth_*`` keys, so the whole pipeline runs without a
corpus. Exit codes: 0 ok, 2 config error, 3 data error, 4 divergence.
"""

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .dataio import (
    CKPT_VERSION, EMB_MAGIC, FEAT_MAGIC, EmbeddingStore, ProtocolRecord, load_checkpoint,
    load_embedding_store, load_features, parse_protocol, parse_trials, read_scores,
    save_checkpoint, save_embedding_store, save_features, write_protocol, write_scores,
    write_trials,
)
from .errors import ConfigError, DataError, IsvError, MissingUtteranceError, TrainingDivergenceError
from .evaluation import (
    BONAFIDE, SPOOF, TRIAL_TYPES, evaluate_system, export_histogram,
    validate_trials,
)
from .features import FeatureMatrix
from .models import (
    E2EISV, ModularBackend, MultiTaskFrontend, PADClassifier, cosine_score,
    estimator_from_checkpoint, make_backend_input, sample_training_trials,
)
from .synth import Split, make_trials, synth_embedding_world, synth_feature_world

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4

_FORMATS = {
    ".ckpt": f"ISVCKPT{CKPT_VERSION}",
    ".emb": EMB_MAGIC.decode(),
    ".feat": FEAT_MAGIC.decode(),
}


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, cfg, command):
        self.cfg = cfg
        self.command = command
        self.dir = Path(cfg.out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.metrics = {}
        self.artifacts = []
        cfg.save(self.dir / "config.txt")
        self.log(event="start", version=__version__, seed=cfg.seed)

    def path(self, name):
        return self.dir / name

    def log(self, **kv):
        line = " ".join(f"{k}={v}" for k, v in {"cmd": self.command, **kv}.items())
        with open(self.dir / "log.txt", "a") as fh:
            fh.write(line + "\n")

    def log_losses(self, model, lines):
        with open(self.dir / "log.txt", "a") as fh:
            for line in lines:
                fh.write(f"cmd={self.command} model={model} {line}\n")

    def metric(self, key, value):
        self.metrics[key] = value

    def artifact(self, path):
        self.artifacts.append(Path(path))

    def finish(self):
        with open(self.dir / "metrics.txt", "w") as fh:
            for k, v in self.metrics.items():
                fh.write(f"{k}={_fmt(v)}\n")
        with open(self.dir / "artifacts.txt", "w") as fh:
            for p in self.artifacts:
                rel = p.relative_to(self.dir) if p.is_relative_to(self.dir) else p
                fh.write(f"file={rel} sha256={_sha256(p)} format={_format_of(p)}\n")
        self.log(event="done", metrics=len(self.metrics), artifacts=len(self.artifacts))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _format_of(path):
    if path.is_dir():
        kinds = sorted({_FORMATS.get(f.suffix, "text") for f in path.iterdir()})
        return "dir:" + "+".join(kinds)
    return _FORMATS.get(path.suffix, "text")


def _sha256(path):
    """Digest of a file's bytes; for a directory, of each file's name and bytes in order."""
    p = Path(path)
    if p.is_file():
        return hashlib.sha256(p.read_bytes()).hexdigest()
    h = hashlib.sha256()
    for f in sorted(p.rglob("*")):
        if f.is_file():
            h.update(str(f.relative_to(p)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


# ---- input resolution ----

def _require(cfg, *keys):
    missing = [k for k in keys if not getattr(cfg, k)]
    if missing:
        raise ConfigError(f"missing config keys: {', '.join(missing)}")


def _check_files(paths):
    """Raise one DataError listing every path that does not exist."""
    absent = [str(p) for p in paths if p and not Path(p).exists()]
    if absent:
        raise DataError("missing input files: " + ", ".join(absent))


def _split_from_records(records, X):
    return Split([r.utt_id for r in records], np.array([r.speaker_id for r in records]),
                 np.array([r.bonafide for r in records]), np.full(len(records), -1), X)


def _load_feature_split(protocol, feature_dir):
    records = parse_protocol(protocol)
    paths = [Path(feature_dir) / f"{r.utt_id}.feat" for r in records]
    absent = [r.utt_id for r, p in zip(records, paths) if not p.exists()]
    if absent:
        raise MissingUtteranceError(absent, f"no feature file for {len(absent)} utterances "
                                            f"in {feature_dir}: {', '.join(absent)}")
    mats = [load_features(p).data for p in paths]
    if len({m.shape for m in mats}) > 1:
        raise DataError("feature matrices differ in shape; fixed-length crops are required")
    return _split_from_records(records, np.stack(mats))


def _store_split(store):
    return Split(list(store.ids), np.asarray(store.speakers), np.asarray(store.bonafide),
                 np.full(len(store.ids), -1), np.asarray(store.embeddings))


def feature_data(cfg):
    """``(train, eval)`` feature splits from files, or from the synthetic world."""
    if cfg.train_protocol or cfg.eval_protocol or cfg.feature_dir:
        _require(cfg, "feature_dir")
        if not (cfg.train_protocol or cfg.eval_protocol):
            raise ConfigError("feature_dir needs train_protocol or eval_protocol")
        _check_files([cfg.train_protocol, cfg.eval_protocol, cfg.feature_dir])
        train = (_load_feature_split(cfg.train_protocol, cfg.feature_dir)
                 if cfg.train_protocol else None)
        ev = _load_feature_split(cfg.eval_protocol, cfg.feature_dir) if cfg.eval_protocol else None
        return train, ev
    world = synth_feature_world(cfg.synth, dtype=np.float64)
    return world.train, world.eval


def embedding_data(cfg):
    """``(train, eval)`` embedding splits from stores, or from the synthetic world."""
    if cfg.train_store or cfg.eval_store:
        _check_files([cfg.train_store, cfg.eval_store])
        train = _store_split(load_embedding_store(cfg.train_store)) if cfg.train_store else None
        ev = _store_split(load_embedding_store(cfg.eval_store)) if cfg.eval_store else None
        return train, ev
    world = synth_embedding_world(cfg.synth)
    return world.train, world.eval


def eval_trials(cfg, split):
    if cfg.trials:
        _check_files([cfg.trials])
        return parse_trials(cfg.trials)
    if split is None:
        return None
    # replay trials: each replayed utterance against every bona fide one of its speaker
    bona_per_spk = {s: int(np.sum(split.bonafide & (split.speakers == s)))
                    for s in set(split.speakers)}
    n_rep = sum(bona_per_spk[s] for s, b in zip(split.speakers, split.bonafide) if not b)
    ratio = cfg.synth.ze_per_replay
    cap = int(round(ratio * n_rep)) if n_rep and ratio > 0 else None
    return make_trials(split, max_zero_effort=cap, seed=cfg.seed)


# ---- verbs ----

def cmd_simulate(cfg):
    run = Run(cfg, "simulate")
    if cfg.world == "embedding":
        world = synth_embedding_world(cfg.synth)
    else:
        world = synth_feature_world(cfg.synth, dtype=np.float32)
    for name, split in (("train", world.train), ("eval", world.eval)):
        records = [ProtocolRecord(u, s, BONAFIDE if b else SPOOF)
                   for u, s, b in zip(split.ids, split.speakers, split.bonafide)]
        write_protocol(records, run.path(f"{name}.protocol"))
        run.artifact(run.path(f"{name}.protocol"))
        if world.kind == "embedding":
            store = EmbeddingStore(list(split.ids), split.X.astype(np.float32),
                                   list(split.speakers), list(split.bonafide))
            save_embedding_store(store, run.path(f"{name}.emb"))
            run.artifact(run.path(f"{name}.emb"))
        else:
            fdir = run.path("features")
            fdir.mkdir(exist_ok=True)
            for u, x in zip(split.ids, split.X):
                save_features(FeatureMatrix(x), fdir / f"{u}.feat")
        run.metric(f"{name}.utterances", len(split))
        run.metric(f"{name}.speakers", len(set(split.speakers)))
        run.metric(f"{name}.replayed", int((~split.bonafide).sum()))
    if world.kind == "feature":
        run.artifact(run.path("features"))
    trials = world.eval_trials()
    write_trials(trials, run.path("eval.trials"))
    run.artifact(run.path("eval.trials"))
    speaker_of = dict(zip(world.eval.ids, world.eval.speakers))
    bona_of = dict(zip(world.eval.ids, world.eval.bonafide))
    problems = validate_trials(trials, speaker_of, bona_of)
    for t in TRIAL_TYPES:
        run.metric(f"trials.{t}", sum(tr.type == t for tr in trials))
    run.metric("trials.problems", len(problems))
    run.finish()
    return run.metrics


def _frontend(cfg, sid_weight, pad_weight):
    return MultiTaskFrontend(channels=tuple(cfg.encoder_channels), embedding_dim=cfg.embedding_dim,
                             mfm=cfg.encoder_mfm, sid_weight=sid_weight, pad_weight=pad_weight,
                             n_steps=cfg.frontend_steps, batch_size=cfg.frontend_batch_size,
                             lr=cfg.lr, weight_decay=cfg.weight_decay, seed=cfg.seed,
                             precision=cfg.precision)


def _eer_metrics(run, prefix, report):
    for name, value in report.eers().items():
        if value is not None:
            run.metric(f"{prefix}.{name}_eer", value)


def _training_split(train, verb):
    if train is None:
        raise ConfigError(f"{verb} needs train_protocol")
    return train


def cmd_train_frontend(cfg):
    train, ev = feature_data(cfg)
    _training_split(train, "train-frontend")
    trials = eval_trials(cfg, ev)
    run = Run(cfg, "train-frontend")
    run.log(event="data", train=len(train), eval=0 if ev is None else len(ev), mtl=cfg.mtl)
    if cfg.mtl:
        sid = pad = _frontend(cfg, 1.0, 1.0).fit(train.X, train.speakers, train.bonafide)
        run.log_losses("mtl", sid.loss_log_)
        save_checkpoint(sid.to_checkpoint(), run.path("frontend.ckpt"))
    else:
        sid = _frontend(cfg, 1.0, 0.0).fit(train.X, train.speakers, train.bonafide)
        run.log_losses("sid", sid.loss_log_)
        pad = _frontend(cfg, 0.0, 1.0).fit(train.X, train.speakers, train.bonafide)
        run.log_losses("pad", pad.loss_log_)
        save_checkpoint(sid.to_checkpoint(), run.path("frontend.ckpt"))
        save_checkpoint(pad.to_checkpoint(), run.path("pad.ckpt"))
        run.artifact(run.path("pad.ckpt"))
    run.artifact(run.path("frontend.ckpt"))
    scores = {}
    for name, split in (("train", train), ("eval", ev)):
        if split is None:
            continue
        emb = sid.transform(split.X).astype(np.float32)
        store = EmbeddingStore(list(split.ids), emb, list(split.speakers), list(split.bonafide))
        save_embedding_store(store, run.path(f"{name}.emb"))
        run.artifact(run.path(f"{name}.emb"))
        scores.update(zip(split.ids, pad.predict_pad_proba(split.X).tolist()))
    write_scores(scores, run.path("pad_scores.txt"))
    run.artifact(run.path("pad_scores.txt"))
    if ev is not None and trials:
        emb = dict(zip(ev.ids, sid.transform(ev.X)))
        sv, _ = evaluate_system(lambda a, b: cosine_score(np.array(a), np.array(b)), trials, emb)
        pd_, _ = evaluate_system(lambda a, b: np.asarray(b, dtype=np.float64), trials, scores)
        run.metric("eval.ze_eer", sv.ze_eer)
        run.metric("eval.pad_eer", pd_.pad_eer)
    run.finish()
    return run.metrics


def cmd_train_e2e(cfg):
    train, ev = feature_data(cfg)
    _training_split(train, "train-e2e")
    trials = eval_trials(cfg, ev)
    run = Run(cfg, "train-e2e")
    model = E2EISV(channels=tuple(cfg.encoder_channels), embedding_dim=cfg.embedding_dim,
                   mfm=cfg.encoder_mfm, isv_hidden=tuple(cfg.e2e_isv_hidden),
                   isv_product=cfg.e2e_isv_product, speakers_per_batch=cfg.e2e_speakers_per_batch,
                   utts_per_speaker=cfg.e2e_utts_per_speaker, n_steps=cfg.e2e_steps, lr=cfg.lr,
                   weight_decay=cfg.weight_decay, seed=cfg.seed, precision=cfg.precision)
    model.fit(train.X, train.speakers, train.bonafide)
    run.log_losses("e2e", model.loss_log_)
    save_checkpoint(model.to_checkpoint(), run.path("e2e.ckpt"))
    run.artifact(run.path("e2e.ckpt"))
    if ev is not None and trials:
        emb = dict(zip(ev.ids, model.transform(ev.X)))
        rep, ss = evaluate_system(
            lambda a, b: model.score_embeddings(np.array(a), np.array(b)), trials, emb)
        _eer_metrics(run, "eval.e2e", rep)
    run.finish()
    return run.metrics


def _pad_scores_for(cfg, run, train, ev):
    """PAD probabilities for every utterance from the configured source."""
    if cfg.pad_source == "file":
        _require(cfg, "pad_scores")
        _check_files([cfg.pad_scores])
        return read_scores(cfg.pad_scores), None
    head = PADClassifier(hidden=tuple(cfg.pad_hidden), n_steps=cfg.pad_steps, lr=cfg.lr,
                         weight_decay=cfg.weight_decay, seed=cfg.seed, precision=cfg.precision)
    head.fit(train.X, train.bonafide)
    run.log_losses("pad_head", head.loss_log_)
    scores = {}
    for split in (train, ev):
        if split is not None:
            scores.update(zip(split.ids, head.decision_function(split.X).tolist()))
    return scores, head


def cmd_train_backend(cfg):
    if cfg.pad_source == "file" and not cfg.pad_scores:
        raise ConfigError("pad_source=file needs pad_scores")
    train, ev = embedding_data(cfg)
    if train is None:
        raise ConfigError("train-backend needs train_store (or no stores for the synthetic world)")
    if train.bonafide.all():
        raise ConfigError("training store has no replayed utterances; PAD labels are required")
    run = Run(cfg, "train-backend")
    if cfg.alpha == 0:
        run.log(event="warning", message="alpha=0_disables_the_SV_loss_and_tends_to_overfit")
    pad_scores, head = _pad_scores_for(cfg, run, train, ev)
    if head is not None:
        save_checkpoint(head.to_checkpoint(), run.path("pad_head.ckpt"))
        run.artifact(run.path("pad_head.ckpt"))
    ei, ti, types = sample_training_trials(train.speakers, train.bonafide,
                                           cfg.backend_trials_per_type, cfg.seed)
    if cfg.pad_input == "labels":
        pad_col = train.bonafide[ti].astype(np.float64)
    else:
        missing = [train.ids[i] for i in np.unique(ti) if train.ids[i] not in pad_scores]
        if missing:
            raise MissingUtteranceError(missing, "no PAD score for: " + ", ".join(missing))
        pad_col = np.array([pad_scores[train.ids[i]] for i in ti])
    X = make_backend_input(train.X[ei], train.X[ti], pad_col)
    backend = ModularBackend(n_layers=cfg.backend_layers, n_nodes=cfg.backend_nodes,
                             alpha=cfg.alpha, use_pad_labels=cfg.pad_input == "labels",
                             n_steps=cfg.backend_steps, batch_size=cfg.backend_batch_size,
                             type_mix=tuple(cfg.backend_type_mix), lr=cfg.lr,
                             weight_decay=cfg.weight_decay, seed=cfg.seed,
                             precision=cfg.precision)
    backend.fit(X, np.asarray(TRIAL_TYPES)[types])
    run.log_losses("backend", backend.loss_log_)
    save_checkpoint(backend.to_checkpoint(), run.path("backend.ckpt"))
    run.artifact(run.path("backend.ckpt"))
    # stability monitor: a collapsed back-end scores every trial alike
    final = backend.decision_function(X)
    run.metric("monitor.train_score_std", float(np.std(final)))
    for code, name in enumerate(TRIAL_TYPES):
        run.metric(f"monitor.train_mean.{name}", float(final[types == code].mean()))
    run.metric("train.steps", backend.step_)
    if ev is not None:
        trials = eval_trials(cfg, ev)
        store = _modular_store(ev, pad_scores)
        rep, _ = evaluate_system(_modular_scorer(backend), trials, store)
        _eer_metrics(run, "eval.modular", rep)
    run.finish()
    return run.metrics


def _modular_store(split, pad_scores):
    missing = [u for u in split.ids if u not in pad_scores]
    if missing:
        raise MissingUtteranceError(missing, "no PAD score for: " + ", ".join(missing))
    return {u: (x, pad_scores[u]) for u, x in zip(split.ids, split.X)}


def _modular_scorer(backend):
    def score(enroll, test):
        e = np.array([item[0] for item in enroll])
        t = np.array([item[0] for item in test])
        p = np.array([item[1] for item in test], dtype=np.float64)
        return backend.decision_function(make_backend_input(e, t, p))
    return score


def _load_estimator(path):
    return estimator_from_checkpoint(load_checkpoint(path))


def cmd_evaluate(cfg):
    needs = {"modular": ["backend_checkpoint"], "e2e": ["e2e_checkpoint"]}
    missing_keys = [k for s in cfg.scorers for k in needs.get(s, [])if not getattr(cfg, k)]
    if "modular" in cfg.scorers and not (cfg.pad_checkpoint or cfg.pad_scores):
        missing_keys.append("pad_checkpoint|pad_scores")
    if missing_keys:
        raise ConfigError(f"missing config keys: {', '.join(missing_keys)}")
    _check_files([cfg.backend_checkpoint if "modular" in cfg.scorers else "",
                  cfg.e2e_checkpoint if "e2e" in cfg.scorers else "",
                  cfg.pad_checkpoint, cfg.pad_scores, cfg.trials, cfg.eval_store,
                  cfg.eval_protocol, cfg.feature_dir])
    run = Run(cfg, "evaluate")
    rows = []
    emb_scorers = [s for s in cfg.scorers if s in ("cosine", "modular")]
    if emb_scorers:
        _, ev = embedding_data(cfg) if not cfg.eval_store else (None, _store_split(
            load_embedding_store(cfg.eval_store)))
        trials = eval_trials(cfg, ev)
        for scorer in emb_scorers:
            if scorer == "cosine":
                store = dict(zip(ev.ids, ev.X))
                fn = lambda a, b: cosine_score(np.array(a), np.array(b))  # noqa: E731
            else:
                backend = _load_estimator(cfg.backend_checkpoint)
                if cfg.pad_checkpoint:
                    head = _load_estimator(cfg.pad_checkpoint)
                    pad = dict(zip(ev.ids, head.decision_function(ev.X).tolist()))
                else:
                    pad = read_scores(cfg.pad_scores)
                store = _modular_store(ev, pad)
                fn = _modular_scorer(backend)
            rows.append((scorer,) + _evaluate_one(run, scorer, fn, trials, store))
    if "e2e" in cfg.scorers:
        _, ev = feature_data(cfg)
        trials = eval_trials(cfg, ev)
        model = _load_estimator(cfg.e2e_checkpoint)
        store = dict(zip(ev.ids, model.transform(ev.X)))
        fn = lambda a, b: model.score_embeddings(np.array(a), np.array(b))  # noqa: E731
        rows.append(("e2e",) + _evaluate_one(run, "e2e", fn, trials, store))
    lines = ["scorer ZE-EER PAD-EER ISV-EER"] + [" ".join([r[0]] + r[1].row()) for r in rows]
    run.path("report.txt").write_text("\n".join(lines) + "\n")
    run.artifact(run.path("report.txt"))
    run.finish()
    return run.metrics


def _evaluate_one(run, name, fn, trials, store):
    rep, ss = evaluate_system(fn, trials, store)
    _eer_metrics(run, f"eval.{name}", rep)
    for t in TRIAL_TYPES:
        s = ss.of_type(t)
        if len(s):
            run.metric(f"eval.{name}.mean.{t}", float(s.mean()))
        run.metric(f"eval.{name}.count.{t}", int(len(s)))
    value_range = (0.0, 1.0) if name != "cosine" else (-1.0, 1.0)
    stem = run.path(f"hist_{name}")
    export_histogram(ss, run.cfg.histogram_bins, stem, value_range=value_range,
                     title=f"{name} scores")
    run.artifact(stem.with_suffix(".tsv"))
    run.artifact(stem.with_suffix(".svg"))
    return (rep,)


COMMANDS = {
    "simulate": cmd_simulate,
    "train-frontend": cmd_train_frontend,
    "train-e2e": cmd_train_e2e,
    "train-backend": cmd_train_backend,
    "evaluate": cmd_evaluate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="isvkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file (defaults when omitted)")
        p.add_argument("--seed", type=int)
        p.add_argument("--mtl", action="store_true", default=None,
                       help="train SID and PAD jointly (train-frontend)")
        p.add_argument("--pad-input", choices=("labels", "predictions"))
        p.add_argument("--alpha", type=float)
        p.add_argument("--out-dir")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key; repeatable")
    return parser


def resolve_config(args):
    overrides = []
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides.append((k.strip(), v.strip()))
    for key, value in (("seed", args.seed), ("mtl", args.mtl), ("pad_input", args.pad_input),
                       ("alpha", args.alpha), ("out_dir", args.out_dir)):
        if value is not None:
            overrides.append((key, str(value)))
    if args.config:
        return RunConfig.load(args.config, overrides)
    return RunConfig.from_pairs(overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"ERROR: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergenceError as exc:
        print(f"ERROR: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, IsvError) as exc:
        print(f"ERROR: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"ERROR: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
