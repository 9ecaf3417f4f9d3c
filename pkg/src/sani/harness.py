"""Experiment orchestration and the `sani` command line.

Subcommands
-----------
  sani gen-corpus -c gen.json -o DIR
  sani finetune  -c exp.json --curve {mlm|mlmA|ppmlm|clm|clmA|ppclm}
  sani sanitize  -c exp.json --from CKPT --strategy {sani|pruning|repair-only} [--seed N]
  sani eval      --ckpt CKPT -c exp.json
  sani report    -d OUTDIR

Exit codes: 0 success, 1 configuration error, 2 runtime error.
SANI_THREADS bounds evaluation worker parallelism.

An experiment starts from a briefly pretrained model (standard language
modeling on a background corpus whose sensitive words are disjoint from
the target corpus), mirroring the usual pretrain-then-specialize flow;
fine-tuning curves, sanitization runs, and reports all hang off one
experiment config.  Every run is deterministic given its config and
seeds: rerunning produces byte-identical CSVs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus as C
from . import downstream as D
from . import metrics as ME
from . import model as M
from . import objectives as O
from . import tensor as T
from . import unlearn as U
from .errors import ConfigError, EmptyBlacklist, EmptyCorpus, IncompleteRuns, SaniError

MLM_CURVES = ("mlm", "mlmA", "ppmlm")
CLM_CURVES = ("clm", "clmA", "ppclm")
CURVES = MLM_CURVES + CLM_CURVES

_REQUIRED_KEYS = {
    "model",
    "corpus",
    "pretrain_corpus",
    "labeled_set",
    "blacklists",
    "heldout_fraction",
    "eval_fraction",
    "pretrain_epochs",
    "finetune_epochs",
    "measurement_epochs",
    "strategies",
    "seeds",
    "unlearn_target",
    "seq_len",
    "lr_start",
    "downstream_epochs",
    "output_dir",
}
_MODEL_KEYS = {"n_layers", "n_heads", "d_model", "d_ff", "max_seq", "seed"}


def worker_threads() -> int:
    raw = os.environ.get("SANI_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"SANI_THREADS must be an integer, got {raw!r}")


@dataclass
class ExperimentConfig:
    model: dict
    corpus: str
    pretrain_corpus: str | None
    labeled_set: str | None
    blacklists: dict
    heldout_fraction: float
    eval_fraction: float
    pretrain_epochs: int
    finetune_epochs: int
    measurement_epochs: list
    strategies: list
    seeds: list
    unlearn_target: str
    seq_len: int
    lr_start: float
    downstream_epochs: list | None
    output_dir: str
    base_dir: Path = field(default_factory=Path)

    def validate(self):
        if set(self.model) != _MODEL_KEYS:
            raise ConfigError(f"model keys must be {sorted(_MODEL_KEYS)}")
        if set(self.blacklists) != {"direct", "indirect", "conf"}:
            raise ConfigError("blacklists must map direct, indirect, conf")
        if self.unlearn_target not in ("identifiers", "conf"):
            raise ConfigError("unlearn_target must be 'identifiers' or 'conf'")
        for s in self.strategies:
            if s not in U.STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}")
        bad = [e for e in self.measurement_epochs if not (1 <= e <= self.finetune_epochs)]
        if bad:
            raise ConfigError(f"measurement epochs {bad} outside [1, {self.finetune_epochs}]")
        if not (0.0 < self.eval_fraction <= 1.0):
            raise ConfigError("eval_fraction must be in (0, 1]")
        if self.finetune_epochs < 1 or self.pretrain_epochs < 0:
            raise ConfigError("bad epoch counts")
        for p in self._referenced_files():
            if not p.exists():
                raise ConfigError(f"referenced file does not exist: {p}")

    def _referenced_files(self) -> list:
        out = [self.path(self.corpus)]
        if self.pretrain_corpus:
            out.append(self.path(self.pretrain_corpus))
        if self.labeled_set:
            out.append(self.path(self.labeled_set))
        out += [self.path(v) for v in self.blacklists.values()]
        return out

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def outdir(self) -> Path:
        return self.path(self.output_dir)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in _REQUIRED_KEYS}
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def pretrain_hash(self) -> str:
        """Hash over only the inputs that shape pretraining, so experiment
        configs differing in unlearn target or strategies share the cache."""
        keys = ("model", "corpus", "pretrain_corpus", "labeled_set", "heldout_fraction", "pretrain_epochs", "seq_len", "lr_start")
        d = {k: getattr(self, k) for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        obj = json.load(f)
    keys = set(obj)
    if keys != _REQUIRED_KEYS:
        missing = _REQUIRED_KEYS - keys
        unknown = keys - _REQUIRED_KEYS
        raise ConfigError(f"experiment keys: missing {sorted(missing)}, unknown {sorted(unknown)}")
    cfg = ExperimentConfig(base_dir=path.parent, **obj)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Experiment context: corpora, vocab, blacklists, chunk caches, evaluators
# ---------------------------------------------------------------------------


class ExperimentContext:
    def __init__(self, cfg: ExperimentConfig, variant: str):
        self.cfg = cfg
        self.variant = variant
        self.threads = worker_threads()

        raw_docs = C.load_corpus_jsonl(cfg.path(cfg.corpus))
        pseudo_docs = [C.pseudonymize(d) for d in raw_docs]
        pre_docs = C.load_corpus_jsonl(cfg.path(cfg.pretrain_corpus)) if cfg.pretrain_corpus else []
        self.labeled = D.load_labeled_jsonl(cfg.path(cfg.labeled_set)) if cfg.labeled_set else None
        vocab_docs = list(raw_docs) + list(pseudo_docs) + list(pre_docs)
        if self.labeled:
            vocab_docs += [C.AnnotatedDocument(id=f"lab{i}", words=ex.words) for i, ex in enumerate(self.labeled)]
        self.vocab = C.build_vocab(vocab_docs)

        raw_tok = C.tokenize_documents(raw_docs, self.vocab)
        self.split = C.split_corpus(raw_tok, cfg.heldout_fraction)
        pseudo_tok = C.tokenize_documents(pseudo_docs, self.vocab)
        self.split_pseudo = C.split_corpus(pseudo_tok, cfg.heldout_fraction)
        self.pretrain_docs = C.tokenize_documents(pre_docs, self.vocab) if pre_docs else []

        bl = {cat: C.load_blacklist(cfg.path(p), self.vocab, self.split.train) for cat, p in cfg.blacklists.items()}
        bl["identifiers"] = C.Blacklist.merge(bl["direct"], bl["indirect"])
        self.blacklists = bl
        self.target = bl["identifiers"] if cfg.unlearn_target == "identifiers" else bl["conf"]

        add_bos = variant == M.CLM
        self.train_chunks = O.build_chunks(self.split.train, cfg.seq_len, add_bos)
        self.heldout_chunks = O.build_chunks(self.split.heldout, cfg.seq_len, add_bos)
        self.pseudo_chunks = O.build_chunks(self.split_pseudo.train, cfg.seq_len, add_bos)
        self.pretrain_chunks = O.build_chunks(self.pretrain_docs, cfg.seq_len, add_bos) if self.pretrain_docs else []

        # Regurgitation is measured on a deterministic slice of the training
        # split; counts and repetitions stay self-consistent over the slice.
        n_train = len(self.split.train)
        if cfg.eval_fraction >= 1.0:
            self.eval_docs = self.split.train
            self.eval_chunks = self.train_chunks
        else:
            k = max(1, int(round(cfg.eval_fraction * n_train)))
            rng = np.random.default_rng(np.random.SeedSequence(entropy=(0xE7A1,)))
            picks = np.sort(rng.choice(n_train, size=k, replace=False))
            self.eval_docs = [self.split.train[i] for i in picks]
            self.eval_chunks = O.build_chunks(self.eval_docs, cfg.seq_len, add_bos)

    def model_config(self) -> M.ModelConfig:
        m = self.cfg.model
        return M.ModelConfig(
            variant=self.variant,
            n_layers=int(m["n_layers"]),
            n_heads=int(m["n_heads"]),
            d_model=int(m["d_model"]),
            d_ff=int(m["d_ff"]),
            max_seq=int(m["max_seq"]),
            vocab_size=self.vocab.size,
            seed=int(m["seed"]),
        )

    def schedule(self, total_epochs: int) -> O.TrainSchedule:
        return O.TrainSchedule(total_epochs=total_epochs, lr_start=self.cfg.lr_start, seq_len=self.cfg.seq_len)

    def utility(self, params: M.ModelParams) -> float:
        fn = ME.utility_mlm if self.variant == M.MLM else ME.utility_clm
        return fn(params, self.split.heldout, self.cfg.seq_len, chunks=self.heldout_chunks, threads=self.threads)

    def full_eval(self, params: M.ModelParams, run: str, epoch: int, phase: str):
        """One measurement point: prediction pass over the evaluation slice
        of the raw training split, both blacklist tables, utility on
        held-out text."""
        passes = ME.eval_pass_mlm if self.variant == M.MLM else ME.eval_pass_clm
        preds = passes(params, self.eval_docs, self.cfg.seq_len, chunks=self.eval_chunks, threads=self.threads)
        ev_id, table_id = ME.count_regurgitations(preds, self.eval_docs, self.blacklists["identifiers"])
        ev_conf, table_conf = ME.count_regurgitations(preds, self.eval_docs, self.blacklists["conf"])
        record = ME.MetricsRecord(
            run=run,
            epoch=epoch,
            phase=phase,
            privacy=ME.privacy_metric(table_id),
            regurgitation=ME.regurgitation_metric(table_conf),
            utility=self.utility(params),
            events=ev_id if self.cfg.unlearn_target == "identifiers" else ev_conf,
        )
        return record, {"identifiers": table_id, "conf": table_conf}


class Evaluator:
    """Collects metric records and term tables for one run."""

    def __init__(self, ctx: ExperimentContext, run: str):
        self.ctx = ctx
        self.run = run
        self.records: list = []
        self.tables: dict = {}

    def __call__(self, params, epoch, phase):
        record, tables = self.ctx.full_eval(params, self.run, epoch, phase)
        self.records.append(record)
        self.tables[epoch] = tables
        return record

    def write(self, outdir: Path) -> list:
        files = [f"metrics_{self.run}.csv"]
        ME.write_metrics_csv(self.records, outdir / files[0])
        for epoch, tables in sorted(self.tables.items()):
            for which, table in tables.items():
                name = f"term_{self.run}_ep{epoch}_{which}.csv"
                ME.write_term_table_csv(table, outdir / name)
                files.append(name)
        return files


def write_manifest(outdir: Path, run: str, kind: str, cfg: ExperimentConfig, files: list, wallclock: dict, **extra):
    manifest = {
        "run": run,
        "kind": kind,
        "config_hash": cfg.config_hash(),
        "files": files,
        "wallclock": {k: round(v, 3) for k, v in wallclock.items()},
        **extra,
    }
    with open(outdir / f"manifest_{run}.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)


# ---------------------------------------------------------------------------
# Pretraining (cached per config hash)
# ---------------------------------------------------------------------------


def ensure_pretrained(ctx: ExperimentContext) -> M.ModelParams:
    cfg = ctx.cfg
    mc = ctx.model_config()
    params = M.init(mc)
    if cfg.pretrain_epochs <= 0 or not ctx.pretrain_docs:
        return params
    cache = cfg.outdir / f"pretrained_{ctx.variant}.sani"
    tag = cfg.pretrain_hash()
    if cache.exists():
        ck = M.load_checkpoint(cache)
        if ck.meta.get("config_hash") == tag and ck.config == mc:
            return ck.to_params()
    scheme = "mlm" if ctx.variant == M.MLM else "clm"
    schedule = ctx.schedule(cfg.pretrain_epochs)
    opt = T.AdamState()
    for epoch in range(cfg.pretrain_epochs):
        res = O.train_epoch(
            params,
            opt,
            ctx.pretrain_docs,
            ctx.vocab,
            scheme,
            schedule,
            epoch_index=epoch,
            seed=mc.seed,
            chunks=ctx.pretrain_chunks,
        )
        print(f"[pretrain {ctx.variant}] epoch {epoch + 1}/{cfg.pretrain_epochs} loss {res.loss:.4f}", flush=True)
    cfg.outdir.mkdir(parents=True, exist_ok=True)
    M.save_checkpoint(cache, params, epoch=0, seed=mc.seed, meta={"config_hash": tag, "stage": "pretrained"})
    return params


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def curve_setup(ctx: ExperimentContext, curve: str):
    """(scheme, training docs, chunk cache, exclusion blacklist) per curve."""
    if curve in ("mlm", "clm"):
        return curve, ctx.split.train, ctx.train_chunks, None
    if curve in ("mlmA", "clmA"):
        return curve[:3], ctx.split_pseudo.train, ctx.pseudo_chunks, None
    return curve, ctx.split.train, ctx.train_chunks, ctx.blacklists["identifiers"]


def cmd_finetune(cfg: ExperimentConfig, curve: str) -> Evaluator:
    if curve not in CURVES:
        raise ConfigError(f"unknown curve {curve!r}")
    variant = M.MLM if curve in MLM_CURVES else M.CLM
    t0 = time.perf_counter()
    ctx = ExperimentContext(cfg, variant)
    cfg.outdir.mkdir(parents=True, exist_ok=True)
    params = ensure_pretrained(ctx)
    t1 = time.perf_counter()

    scheme, docs, chunks, excl = curve_setup(ctx, curve)
    evaluator = Evaluator(ctx, curve)
    evaluator(params, 0, "finetune")
    schedule = ctx.schedule(cfg.finetune_epochs)
    opt = T.AdamState()
    files = []
    train_s = eval_s = 0.0
    for epoch in range(1, cfg.finetune_epochs + 1):
        s = time.perf_counter()
        res = O.train_epoch(
            params,
            opt,
            docs,
            ctx.vocab,
            scheme,
            schedule,
            epoch_index=epoch - 1,
            seed=ctx.model_config().seed,
            blacklist=excl,
            chunks=chunks,
        )
        train_s += time.perf_counter() - s
        print(f"[finetune {curve}] epoch {epoch}/{cfg.finetune_epochs} loss {res.loss:.4f}", flush=True)
        if epoch in cfg.measurement_epochs:
            s = time.perf_counter()
            evaluator(params, epoch, "finetune")
            ck = f"ckpt_{curve}_ep{epoch}.sani"
            M.save_checkpoint(
                cfg.outdir / ck,
                params,
                epoch=epoch,
                seed=ctx.model_config().seed,
                meta={"curve": curve, "config_hash": cfg.config_hash()},
            )
            files.append(ck)
            eval_s += time.perf_counter() - s
    files += evaluator.write(cfg.outdir)
    write_manifest(
        cfg.outdir,
        curve,
        "finetune",
        cfg,
        files,
        {"pretrain": t1 - t0, "train": train_s, "eval": eval_s},
        variant=variant,
        curve=curve,
        target=cfg.unlearn_target,
    )
    return evaluator


def _downstream_f1_rows(ctx: ExperimentContext, run: str, label: str, params: M.ModelParams, epoch: int, rows: list):
    """Train a fresh classifier on this encoder snapshot and record F1."""
    lab = ctx.labeled
    n_test = max(len(lab) // 5, D.N_CLASSES)
    train_set, test_set = lab[:-n_test], lab[-n_test:]
    _, _, hist = D.train_classifier(params, train_set, ctx.vocab, seed=17, eval_set=test_set)
    rows.append((run, label, epoch, hist[-1]))


def cmd_sanitize(cfg: ExperimentConfig, ckpt_path, strategy: str, seed: int = 0) -> Evaluator:
    if strategy not in U.STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    ck = M.load_checkpoint(ckpt_path)
    variant = ck.config.variant
    ctx = ExperimentContext(cfg, variant)
    if ck.config.vocab_size != ctx.vocab.size:
        raise ConfigError("checkpoint vocabulary does not match the experiment corpus")
    cfg.outdir.mkdir(parents=True, exist_ok=True)
    params = ck.to_params()
    base = ck.meta.get("curve", "ckpt")
    tag = "id" if cfg.unlearn_target == "identifiers" else "conf"
    run = f"{base}-{strategy}-{tag}-s{seed}"
    scheme = "ppmlm" if variant == M.MLM else "ppclm"
    budget = U.UnlearnBudget(finetune_epochs=cfg.finetune_epochs)
    evaluator = Evaluator(ctx, run)

    f1_rows: list = []
    want_f1 = ctx.labeled is not None and cfg.downstream_epochs
    downstream_epochs = set(cfg.downstream_epochs or [])

    def evaluate(p, epoch, phase):
        rec = evaluator(p, epoch, phase)
        if want_f1 and (epoch in downstream_epochs or epoch == 0):
            _downstream_f1_rows(ctx, run, strategy, p, epoch, f1_rows)
        return rec

    t0 = time.perf_counter()
    params, report, _ = U.sanitize(
        params,
        ctx.split.train,
        ctx.vocab,
        ctx.target,
        strategy,
        budget,
        scheme,
        ctx.schedule(cfg.finetune_epochs),
        seed=seed,
        chunks=ctx.train_chunks,
        evaluate=evaluate,
    )
    wall = time.perf_counter() - t0

    files = evaluator.write(cfg.outdir)
    with open(cfg.outdir / f"erasure_{run}.json", "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, sort_keys=True, indent=1)
    files.append(f"erasure_{run}.json")
    ckname = f"ckpt_{run}.sani"
    M.save_checkpoint(cfg.outdir / ckname, params, epoch=budget.repair_epochs, seed=seed, meta={"run": run})
    files.append(ckname)
    if f1_rows:
        fname = f"downstream_{run}.csv"
        with open(cfg.outdir / fname, "w", encoding="utf-8") as f:
            f.write("run,strategy,epoch,f1\n")
            for r, s, e, v in f1_rows:
                f.write(f"{r},{s},{e},{v:.10g}\n")
        files.append(fname)
    write_manifest(
        cfg.outdir,
        run,
        "sanitize",
        cfg,
        files,
        {"sanitize": wall},
        variant=variant,
        strategy=strategy,
        seed=seed,
        base=base,
        target=cfg.unlearn_target,
        repair_epochs=budget.repair_epochs,
    )
    return evaluator


def cmd_eval(ckpt_path, cfg: ExperimentConfig) -> ME.MetricsRecord:
    ck = M.load_checkpoint(ckpt_path)
    ctx = ExperimentContext(cfg, ck.config.variant)
    if ck.config.vocab_size != ctx.vocab.size:
        raise ConfigError("checkpoint vocabulary does not match the experiment corpus")
    run = ck.meta.get("run") or ck.meta.get("curve") or Path(str(ckpt_path)).stem
    record, tables = ctx.full_eval(ck.to_params(), f"eval-{run}", ck.epoch, "finetune")
    cfg.outdir.mkdir(parents=True, exist_ok=True)
    ME.write_metrics_csv([record], cfg.outdir / f"metrics_eval-{run}.csv")
    for which, table in tables.items():
        ME.write_term_table_csv(table, cfg.outdir / f"term_eval-{run}_{which}.csv")
    print(",".join(ME.METRICS_HEADER))
    print(",".join(record.csv_row()))
    return record


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


def _load_manifests(outdir: Path) -> list:
    out = []
    for p in sorted(outdir.glob("manifest_*.json")):
        with open(p, "r", encoding="utf-8") as f:
            out.append(json.load(f))
    return out


def _write_csv(path: Path, header: list, rows: list):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(str(x) for x in row) + "\n")


def cmd_report(outdir) -> Path:
    """Consolidate stored metrics into one plottable CSV per figure."""
    outdir = Path(outdir)
    manifests = _load_manifests(outdir)
    missing = []
    rep = outdir / "report"
    rep.mkdir(exist_ok=True)

    def metrics_for(run):
        p = outdir / f"metrics_{run}.csv"
        return ME.read_metrics_csv(p) if p.exists() else None

    by_kind: dict = {"finetune": {}, "sanitize": {}}
    for m in manifests:
        if m["kind"] in by_kind:
            by_kind[m["kind"]][m["run"]] = m

    for variant, curves, fig in ((M.MLM, MLM_CURVES, "fig1"), (M.CLM, CLM_CURVES, "fig4")):
        priv_rows, util_rows = [], []
        finetune_end = 0
        have_any = False
        for curve in curves:
            man = by_kind["finetune"].get(curve)
            recs = metrics_for(curve) if man else None
            if not recs:
                missing.append(f"{fig}: finetune curve {curve}")
                continue
            have_any = True
            finetune_end = max(finetune_end, max(r.epoch for r in recs))
            for r in recs:
                priv_rows.append((r.run, r.epoch, f"{r.privacy:.10g}"))
                util_rows.append((r.run, r.epoch, f"{r.utility:.10g}"))
        for run, man in sorted(by_kind["sanitize"].items()):
            if man.get("variant") != variant or man.get("target") != "identifiers":
                continue
            recs = metrics_for(run)
            if not recs:
                missing.append(f"{fig}: sanitize metrics for {run}")
                continue
            for r in recs:
                priv_rows.append((r.run, finetune_end + r.epoch, f"{r.privacy:.10g}"))
                util_rows.append((r.run, finetune_end + r.epoch, f"{r.utility:.10g}"))
        if have_any:
            _write_csv(rep / f"{fig}a_privacy.csv", ["series", "global_epoch", "privacy"], priv_rows)
            _write_csv(rep / f"{fig}b_utility.csv", ["series", "global_epoch", "utility"], util_rows)

    # fig2: confidential-term sanitization (regurgitation + downstream F1)
    conf_rows, f1_rows = [], []
    for run, man in sorted(by_kind["sanitize"].items()):
        if man.get("target") != "conf":
            continue
        recs = metrics_for(run)
        if not recs:
            missing.append(f"fig2: sanitize metrics for {run}")
            continue
        for r in recs:
            conf_rows.append((r.run, r.epoch, f"{r.regurgitation:.10g}"))
        p = outdir / f"downstream_{run}.csv"
        if p.exists():
            with open(p, "r", encoding="utf-8") as f:
                next(f)
                for line in f:
                    run_, strat, epoch, f1 = line.strip().split(",")
                    f1_rows.append((run_, epoch, f1))
    if conf_rows:
        _write_csv(rep / "fig2a_regurgitation.csv", ["series", "repair_epoch", "regurgitation"], conf_rows)
    else:
        missing.append("fig2a: no confidential-target sanitize runs")
    if f1_rows:
        _write_csv(rep / "fig2b_downstream_f1.csv", ["series", "repair_epoch", "f1"], f1_rows)
    else:
        missing.append("fig2b: no downstream F1 records")

    # fig3: frequency-stratified regurgitation around one confidential run
    fig3_sources = []
    for run, man in sorted(by_kind["sanitize"].items()):
        if man.get("target") == "conf" and man.get("strategy") == "sani":
            base = man.get("base")
            base_man = by_kind["finetune"].get(base)
            if base_man:
                base_recs = metrics_for(base)
                if base_recs:
                    end = max(r.epoch for r in base_recs if r.phase == "finetune")
                    fig3_sources.append((run, base, end))
            break
    if fig3_sources:
        run, base, end = fig3_sources[0]
        series = [("before", outdir / f"term_{base}_ep{end}_conf.csv")]
        for ep in (1, 2):
            p = outdir / f"term_{run}_ep{ep}_conf.csv"
            if p.exists():
                series.append((f"repair{ep}", p))
        scat_rows, cum_rows = [], []
        for label, p in series:
            if not p.exists():
                missing.append(f"fig3: term table {p.name}")
                continue
            analysis = ME.frequency_analysis(ME.read_term_table_csv(p))
            for term, reps, events in analysis.scatter:
                scat_rows.append((label, term, reps, events))
            for reps, cum in analysis.cumulative:
                cum_rows.append((label, reps, cum))
        if scat_rows:
            _write_csv(rep / "fig3a_term_scatter.csv", ["series", "term", "repetitions", "events"], scat_rows)
            _write_csv(rep / "fig3b_cumulative.csv", ["series", "repetitions", "cumulative_events"], cum_rows)
    else:
        missing.append("fig3: no sani run with confidential target")

    if missing:
        raise IncompleteRuns("missing inputs: " + "; ".join(missing))
    return rep


# ---------------------------------------------------------------------------
# Desk-scale default lab
# ---------------------------------------------------------------------------

DESK_GEN_TRAIN = {
    "n_docs": 480,
    "words_per_doc": 210,
    "n_direct": 40,
    "n_indirect": 24,
    "n_conf": 36,
    "repetition_law": 1.4,
    "seed": 11,
}
DESK_GEN_PRETRAIN = {
    "n_docs": 280,
    "words_per_doc": 200,
    "n_direct": 2,
    "n_indirect": 2,
    "n_conf": 2,
    "repetition_law": 1.0,
    "seed": 97,
}
DESK_MODEL = {"n_layers": 2, "n_heads": 4, "d_model": 64, "d_ff": 256, "max_seq": 64, "seed": 5}


def write_desk_configs(workdir, finetune_epochs: int = 16, seeds=(0, 1, 2)) -> dict:
    """Materialize the default desk lab: corpora, labeled set, experiment
    configs for the identifier, confidential, and causal experiments.
    Returns {name: path}."""
    workdir = Path(workdir)
    data = workdir / "data"
    data.mkdir(parents=True, exist_ok=True)
    paths = {}

    for name, gen in (("train", DESK_GEN_TRAIN), ("pretrain", DESK_GEN_PRETRAIN)):
        cfg_path = data / f"gen_{name}.json"
        with open(cfg_path, "w", encoding="utf-8") as f:
            json.dump(gen, f, indent=1, sort_keys=True)
        out = C.write_synthetic_corpus(C.GenConfig(**gen), data / name)
        paths[f"gen_{name}"] = cfg_path
        paths[f"corpus_{name}"] = out["corpus"]

    labeled = D.make_labeled_set(1600, seed=23)
    D.save_labeled_jsonl(labeled, data / "labeled.jsonl")
    paths["labeled"] = data / "labeled.jsonl"

    measurement = sorted({max(1, finetune_epochs // 8), max(1, finetune_epochs // 4), max(1, finetune_epochs // 2), finetune_epochs})
    base = {
        "model": DESK_MODEL,
        "corpus": "data/train/corpus.jsonl",
        "pretrain_corpus": "data/pretrain/corpus.jsonl",
        "labeled_set": "data/labeled.jsonl",
        "blacklists": {
            "direct": "data/train/blacklist_direct.txt",
            "indirect": "data/train/blacklist_indirect.txt",
            "conf": "data/train/blacklist_conf.txt",
        },
        "heldout_fraction": 0.1,
        "eval_fraction": 0.4,
        "pretrain_epochs": 4,
        "finetune_epochs": finetune_epochs,
        "measurement_epochs": measurement,
        "strategies": list(U.STRATEGIES),
        "seeds": list(seeds),
        "seq_len": 64,
        "lr_start": 1e-4,
        "output_dir": "runs/desk",
    }
    variants = {
        "exp_mlm": {"unlearn_target": "identifiers", "downstream_epochs": None},
        "exp_mlm_conf": {"unlearn_target": "conf", "downstream_epochs": [1, 2, 3, 4]},
        "exp_clm": {"unlearn_target": "identifiers", "downstream_epochs": None},
    }
    for name, extra in variants.items():
        obj = dict(base, **extra)
        p = workdir / f"{name}.json"
        with open(p, "w", encoding="utf-8") as f:
            json.dump(obj, f, indent=1, sort_keys=True)
        paths[name] = p
    return paths


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sani", description="erase-and-repair sanitization lab")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate a synthetic annotated corpus")
    g.add_argument("-c", "--config", required=True)
    g.add_argument("-o", "--outdir", default=".")

    f = sub.add_parser("finetune", help="fine-tune one curve with measurements")
    f.add_argument("-c", "--config", required=True)
    f.add_argument("--curve", required=True, choices=CURVES)

    s = sub.add_parser("sanitize", help="erase and repair from a checkpoint")
    s.add_argument("-c", "--config", required=True)
    s.add_argument("--from", dest="ckpt", required=True)
    s.add_argument("--strategy", required=True, choices=U.STRATEGIES)
    s.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("-c", "--config", required=True)

    r = sub.add_parser("report", help="consolidate per-figure CSVs")
    r.add_argument("-d", "--outdir", required=True)
    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "gen-corpus":
            gen = C.GenConfig.from_json(args.config)
            paths = C.write_synthetic_corpus(gen, args.outdir)
            for k, p in paths.items():
                print(f"{k}: {p}")
        elif args.command == "finetune":
            cmd_finetune(load_experiment(args.config), args.curve)
        elif args.command == "sanitize":
            cmd_sanitize(load_experiment(args.config), args.ckpt, args.strategy, seed=args.seed)
        elif args.command == "eval":
            cmd_eval(args.ckpt, load_experiment(args.config))
        elif args.command == "report":
            rep = cmd_report(args.outdir)
            print(f"report written to {rep}")
    except (ConfigError, EmptyCorpus, EmptyBlacklist, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (SaniError, Exception) as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
