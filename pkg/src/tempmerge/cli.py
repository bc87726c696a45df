"""``tempmerge`` command line: corpus, training, merging, search, evaluation.

Every command reads the same INI manifest (``--config``).  Exit codes are 0
on success, 1 for usage errors and 2 for data or validation errors.  The
environment variable ``TEMPMERGE_SEED`` overrides the manifest's corpus seed.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import re
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .corpuslab import FREQUENCY_ORDER, build_world, read_corpus, specifier_counts, write_corpus
from .encoder import (TENSOR_NAMES, EncoderError, EncoderParams, Vocab, encode_batch,
                      load_checkpoint, save_checkpoint, token_contributions, tokenize)
from .evalkit import (METRICS, EvalError, curve_csv, evaluate_run, per_specifier_csv,
                      per_specifier_report, read_qrels, write_qrels)
from .experiment import (Lab, Manifest, build_base, corpus_queries, fit_router, run_experiment,
                         summary, train_pooled, train_specialists)
from .mergekit import MergeError, merge_average, merge_report, merge_sequence, weight_change
from .retrieval import (Index, RetrievalError, RetrievalRun, build_index, ensemble_search_many,
                        make_run, routed_search_many, search_many)
from .timeparse import Specifier
from .trainlab import RouterParams, TrainingError

log = logging.getLogger("tempmerge")

SEED_ENV = "TEMPMERGE_SEED"
_NAME_RE = re.compile(r"^(?P<method>[a-z0-9_+]+)-(?P<specifier>[a-z0-9_]+)-s(?P<seed>-?\d+)"
                      r"-step(?P<step>\d+)\.(?:ckpt|npz)$")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- checkpoint naming ---------------------------------------------------------

def checkpoint_name(method: str, specifier: str, seed: int, step: int, ext: str = "ckpt") -> str:
    return f"{method}-{specifier}-s{seed}-step{step}.{ext}"


def parse_checkpoint_name(name: str) -> dict:
    m = _NAME_RE.match(Path(name).name)
    if not m:
        raise DataError(f"checkpoint name {Path(name).name!r} does not follow method-specifier-sSEED-stepN")
    d = m.groupdict()
    return {"method": d["method"], "specifier": d["specifier"], "seed": int(d["seed"]), "step": int(d["step"])}


def find_checkpoint(directory: Path, method: str, specifier: str, seed: int, ext: str = "ckpt") -> Path:
    hits = sorted(directory.glob(f"{method}-{specifier}-s{seed}-step*.{ext}"))
    if not hits:
        raise DataError(f"no {method}/{specifier} checkpoint for seed {seed} in {directory}")
    if len(hits) > 1:
        raise DataError(f"several {method}/{specifier} checkpoints for seed {seed}: "
                        + ", ".join(h.name for h in hits))
    return hits[0]


# -- shared loading ------------------------------------------------------------

def _manifest(args) -> Manifest:
    env = os.environ.get(SEED_ENV)
    seed = None
    if env is not None and env.strip():
        try:
            seed = int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return Manifest.read(args.config, seed)


def _lab(man: Manifest) -> Lab:
    d = man.corpus_dir
    if not (d / "passages.jsonl").exists():
        raise DataError(f"no corpus in {d}; run gen-corpus first")
    passages, queries = read_corpus(d)
    vocab = Vocab.load(d / "vocab.txt")
    return Lab(passages, queries, vocab)


def _load(path, vocab: Optional[Vocab] = None) -> EncoderParams:
    params = load_checkpoint(path)
    if vocab is not None:
        if params.vocab_size != len(vocab):
            raise DataError(f"{path}: vocab size {params.vocab_size} != corpus vocab {len(vocab)}")
        if params.vocab_hash and params.vocab_hash != vocab.hash:
            raise DataError(f"{path}: vocab hash does not match the corpus vocab")
    return params


def _save(params: EncoderParams, directory: Path, name: str) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / name
    save_checkpoint(params, path)
    print(path)
    return path


def _base(man: Manifest, args, vocab: Vocab) -> EncoderParams:
    path = args.base_model or find_checkpoint(man.checkpoint_dir, "base", "all", man.experiment.seed)
    return _load(path, vocab)


# -- commands ------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    man = _manifest(args)
    world = build_world(man.experiment.corpus)
    queries = corpus_queries(world)
    write_corpus(man.corpus_dir, world.passages, queries)
    lab = Lab(world.passages, queries)
    lab.vocab.save(man.corpus_dir / "vocab.txt")
    write_qrels(man.corpus_dir / "qrels.test.txt",
                {q.query_id: frozenset(q.gold_passage_ids) for q in queries if q.split == "test"})
    table = specifier_counts(queries)
    rows = [s.value for s in Specifier] + ["non_temporal"]
    print(f"{'specifier':<14}{'train':>7}{'dev':>7}{'test':>7}")
    for r in rows:
        c = table.get(r, {"train": 0, "dev": 0, "test": 0})
        print(f"{r:<14}{c['train']:>7}{c['dev']:>7}{c['test']:>7}")
    tot = {s: sum(table[r][s] for r in table) for s in ("train", "dev", "test")}
    print(f"{'total':<14}{tot['train']:>7}{tot['dev']:>7}{tot['test']:>7}")
    print(f"{len(world.passages)} passages, vocab {len(lab.vocab)} -> {man.corpus_dir}")
    return 0


def cmd_train(args) -> int:
    man = _manifest(args)
    cfg = man.experiment
    lab = _lab(man)
    seed, ckdir = cfg.seed, man.checkpoint_dir
    if args.regularized and not args.pooled:
        raise UsageError("--regularized only applies to --pooled")
    if args.base:
        params, results = build_base(lab, cfg)
        path = _save(params, ckdir, checkpoint_name("base", "all", seed, results["supervised"].best_step))
        results["supervised"].write_trace(path.with_suffix(".trace.csv"))
        return 0
    base = _base(man, args, lab.vocab)
    if args.router:
        router, acc = fit_router(lab, base, cfg.router)
        ckdir.mkdir(parents=True, exist_ok=True)
        path = ckdir / checkpoint_name("router", "all", seed, cfg.router.epochs, "npz")
        router.save(path)
        print(path)
        print(f"dev accuracy {acc:.4f}")
        return 0
    if args.specifier:
        s = args.specifier
        res = train_specialists(lab, base, cfg, only=[s])[s]
        name = checkpoint_name("spec", s.value, seed, res.best_step)
    elif args.lora:
        res = train_pooled(lab, base, cfg.lora)
        name = checkpoint_name("lora", "all", seed, res.best_step)
        np.savez(_mkdir(ckdir) / name.replace(".ckpt", ".adapter.npz"),
                 A=res.adapter.A, B=res.adapter.B, alpha=res.adapter.alpha)
    else:
        conf = replace(cfg.finetune, mode="full_regularized") if args.regularized else cfg.finetune
        res = train_pooled(lab, base, conf)
        name = checkpoint_name("ftreg" if args.regularized else "ft", "all", seed, res.best_step)
    path = _save(res.merged(), ckdir, name)
    res.write_trace(path.with_suffix(".trace.csv"))
    print(f"best step {res.best_step}, dev top-1 {res.best_dev_top1:.4f}")
    return 0


def _mkdir(d: Path) -> Path:
    d.mkdir(parents=True, exist_ok=True)
    return d


def _report_merge(man: Manifest, args, vocab, members: dict, merged: EncoderParams, stem: Path) -> None:
    try:
        base = _base(man, args, vocab)
    except DataError:
        log.warning("no base checkpoint found; skipping the weight-change report")
        return
    rep = merge_report(base, members, merged)
    stem.with_suffix(".report.txt").write_text(rep.to_text(), encoding="utf-8", newline="\n")
    stem.with_suffix(".weights.csv").write_text(rep.to_csv(), encoding="utf-8", newline="\n")
    sys.stdout.write(rep.to_text())
    rep.assert_convex()


def cmd_merge(args) -> int:
    man = _manifest(args)
    vocab = Vocab.load(man.corpus_dir / "vocab.txt")
    seed, ckdir = man.experiment.seed, man.checkpoint_dir
    if args.sequence:
        paths = [find_checkpoint(ckdir, "spec", s.value, seed) for s in FREQUENCY_ORDER]
        models = [_load(p, vocab) for p in paths]
        seq = merge_sequence(models)
        for j, m in enumerate(seq, 1):
            _save(m, ckdir, checkpoint_name("mergeseq", f"n{j}", seed, 0))
        final = _save(seq[-1], ckdir, checkpoint_name("tsm", "all", seed, 0))
        members = {s.value: m for s, m in zip(FREQUENCY_ORDER, models)}
        _report_merge(man, args, vocab, members, seq[-1], final)
        return 0
    paths = [Path(p) for p in args.inputs]
    models = [_load(p, vocab) for p in paths]
    merged = merge_average(models)
    out = Path(args.output) if args.output else ckdir / checkpoint_name("tsm", "all", seed, 0)
    _mkdir(out.parent)
    save_checkpoint(merged, out)
    print(out)
    _report_merge(man, args, vocab, {p.stem: m for p, m in zip(paths, models)}, merged, out)
    return 0


def _index_path(man: Manifest, model: Path) -> Path:
    return man.run_dir / (Path(model).stem + ".index.npz")


def _get_index(man: Manifest, lab: Lab, model_path, params: EncoderParams) -> Index:
    path = _index_path(man, model_path)
    if path.exists():
        idx = Index.load(path)
        if idx.model_hash == params.digest() and idx.passage_ids == [p.passage_id for p in lab.passages]:
            return idx
    return lab.index(params)


def cmd_index(args) -> int:
    man = _manifest(args)
    lab = _lab(man)
    params = _load(args.model, lab.vocab)
    idx = build_index(params, lab.passages, lab.vocab.encode)
    path = _index_path(man, args.model)
    _mkdir(path.parent)
    idx.save(path)
    print(path)
    return 0


def cmd_search(args) -> int:
    man = _manifest(args)
    lab = _lab(man)
    qs = lab.split(args.split)
    if not qs:
        raise DataError(f"no queries in split {args.split!r}")
    toks = [lab.tokens(q) for q in qs]
    k = args.k
    if args.strategy == "single":
        if len(args.model) != 1:
            raise UsageError("single strategy takes exactly one --model")
        params = _load(args.model[0], lab.vocab)
        Q = encode_batch(params, toks)
        hits = search_many(_get_index(man, lab, args.model[0], params), Q, k)
        tag = Path(args.model[0]).stem
    elif args.strategy == "ensemble":
        if len(args.model) < 2:
            raise UsageError("ensemble strategy needs at least two --model checkpoints")
        models = []
        for m in args.model:
            p = _load(m, lab.vocab)
            models.append((p, _get_index(man, lab, m, p)))
        hits = ensemble_search_many(models, toks, k)
        tag = "ensemble"
    else:
        if not (args.router and args.vanilla and args.tuned):
            raise UsageError("routed strategy needs --router, --vanilla and --tuned")
        router = RouterParams.load(args.router)
        van = _load(args.vanilla, lab.vocab)
        tun = _load(args.tuned, lab.vocab)
        hits, routes = routed_search_many(router, (van, _get_index(man, lab, args.vanilla, van)),
                                          (tun, _get_index(man, lab, args.tuned, tun)), toks, k)
        tag = "routed"
        print(f"routed to tuned: {sum(r == 'tuned' for r in routes)}/{len(routes)}")
    run = make_run([q.query_id for q in qs], hits, args.strategy, k)
    out = Path(args.output) if args.output else man.run_dir / f"{tag}.{args.split}.k{k}.trec"
    _mkdir(out.parent)
    run.write(out)
    print(out)
    return 0


def cmd_eval(args) -> int:
    run = RetrievalRun.read(args.run)
    qrels = read_qrels(args.qrels)
    res = evaluate_run(run, qrels, METRICS)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["metric", "value"])
    for m, v in res.items():
        w.writerow([m, f"{v:.6f}"])
    if args.config:
        man = _manifest(args)
        _, queries = read_corpus(man.corpus_dir)
        per = per_specifier_report(run, [q for q in queries if q.query_id in run.hits], qrels, 20)
        text = per_specifier_csv(per)
        sys.stdout.write("\n" + text)
        if args.output_dir:
            d = _mkdir(Path(args.output_dir))
            (d / (Path(args.run).stem + ".per_specifier.csv")).write_text(text, encoding="utf-8", newline="\n")
    if args.output_dir:
        d = _mkdir(Path(args.output_dir))
        buf = io.StringIO()
        cw = csv.writer(buf, lineterminator="\n")
        cw.writerow(["metric", "value"])
        for m, v in res.items():
            cw.writerow([m, f"{v:.6f}"])
        (d / (Path(args.run).stem + ".metrics.csv")).write_text(buf.getvalue(), encoding="utf-8", newline="\n")
    return 0


def cmd_analyze_weights(args) -> int:
    base = load_checkpoint(args.base)
    rows = []
    for p in args.models:
        total, per = weight_change(base, load_checkpoint(p))
        rows.append([Path(p).stem, f"{total:.10g}"] + [f"{per[t]:.10g}" for t in TENSOR_NAMES])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "total"] + list(TENSOR_NAMES))
    w.writerows(rows)
    if args.output:
        Path(args.output).write_text(buf.getvalue(), encoding="utf-8", newline="\n")
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_dump_scores(args) -> int:
    if args.vocab:
        vocab = Vocab.load(args.vocab)
    else:
        vocab = Vocab.load(_manifest(args).corpus_dir / "vocab.txt")
    params = _load(args.model, vocab)
    if args.passage_id:
        if not args.config:
            raise UsageError("--passage-id needs --config to locate the corpus")
        passages, _ = read_corpus(_manifest(args).corpus_dir)
        found = [p for p in passages if p.passage_id == args.passage_id]
        if not found:
            raise DataError(f"unknown passage id {args.passage_id}")
        ptext = found[0].text
    else:
        ptext = args.passage
    qtok, ptok = tokenize(args.query), tokenize(ptext)
    if not ptok:
        raise DataError("empty passage")
    if not qtok:
        raise DataError("empty query")
    M = token_contributions(params, [vocab.id(t) for t in qtok], [vocab.id(t) for t in ptok])
    qnames = qtok + ["<bias>"]
    pnames = ptok + ["<bias>"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_pos", "query_token", "passage_pos", "passage_token", "contribution"])
    for i, qt in enumerate(qnames):
        for j, pt in enumerate(pnames):
            w.writerow([i, qt, j, pt, repr(float(M[i, j]))])
    if args.output:
        Path(args.output).write_text(buf.getvalue(), encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(buf.getvalue())
    log.info("total score %r", float(M.sum()))
    return 0


def cmd_run_experiment(args) -> int:
    man = _manifest(args)
    seeds = args.seeds or [man.experiment.seed]
    for seed in seeds:
        res = run_experiment(man.experiment.with_seed(seed))
        d = _mkdir(man.run_dir / f"experiment-s{seed}")
        files = {
            "table.txt": res.table.to_text(),
            "table.csv": res.table.to_csv(),
            "curve.csv": curve_csv(res.curve_rows()),
            "per_specifier.csv": _per_spec_matrix(res),
            "weights.csv": _weights_csv(res),
            "merge_report.txt": res.merge.to_text(),
            "summary.txt": summary(res),
        }
        for name, text in files.items():
            (d / name).write_text(text, encoding="utf-8", newline="\n")
        sys.stdout.write(summary(res))
    return 0


def _per_spec_matrix(res) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    groups = [s for s in Specifier]
    w.writerow(["model"] + [g.value for g in groups] + ["non_temporal"])
    rows = [(f"spec_{s.value}", ev) for s, ev in res.specialist_evals.items()]
    rows += [(m, res.evaluations[m]) for m in res.evaluations]
    for name, ev in rows:
        w.writerow([name] + [f"{ev.specifier(g):.6f}" for g in groups] + [f"{ev.specifier(None):.6f}"])
    return buf.getvalue()


def _weights_csv(res) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "total"])
    for s in res.specialists:
        w.writerow([f"spec_{s.value}", f"{res.merge.member_change[s.value]:.10g}"])
    for m, v in res.changes.items():
        w.writerow([m, f"{v:.10g}"])
    return buf.getvalue()


# -- parser ---------------------------------------------------------------------

def _specifier_arg(value: str) -> Specifier:
    try:
        return Specifier.parse(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="tempmerge", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, fn, help, config=True):
        p = sub.add_parser(name, help=help)
        if config:
            p.add_argument("--config", required=True, help="experiment manifest (INI)")
        p.set_defaults(func=fn)
        return p

    cmd("gen-corpus", cmd_gen_corpus, "generate passages.jsonl / queries.jsonl / vocab / qrels")

    p = cmd("train", cmd_train, "train the base model, a specialist, a pooled baseline or the router")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--base", action="store_true", help="build the base model")
    g.add_argument("--specifier", type=_specifier_arg, help="single-specifier model, e.g. from_to or in_early")
    g.add_argument("--pooled", action="store_true", help="fine-tune on all temporal training queries")
    g.add_argument("--lora", action="store_true", help="LoRA fine-tuning on all temporal training queries")
    g.add_argument("--router", action="store_true", help="temporal / non-temporal query router")
    p.add_argument("--regularized", action="store_true", help="with --pooled: dropout and weight decay")
    p.add_argument("--base-model", help="base checkpoint (default: found in the checkpoint dir)")

    p = cmd("merge", cmd_merge, "average checkpoints, or build the prefix merge sequence")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--inputs", nargs="+", help="checkpoints to average")
    g.add_argument("--sequence", action="store_true", help="prefix merges of the 7 specialists")
    p.add_argument("--output", help="output checkpoint for --inputs")
    p.add_argument("--base-model", help="base checkpoint for the weight-change report")

    p = cmd("index", cmd_index, "encode every passage with a checkpoint")
    p.add_argument("--model", required=True)

    p = cmd("search", cmd_search, "retrieve for a query split and write a TREC run")
    p.add_argument("--strategy", choices=("single", "ensemble", "routed"), default="single")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--model", nargs="+", default=[])
    p.add_argument("--router")
    p.add_argument("--vanilla")
    p.add_argument("--tuned")
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--output")

    p = cmd("eval", cmd_eval, "score a TREC run against qrels", config=False)
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--config", help="manifest; adds the per-specifier breakdown")
    p.add_argument("--output-dir")

    p = cmd("analyze-weights", cmd_analyze_weights, "weight-change magnitude vs a base", config=False)
    p.add_argument("--base", required=True)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--output")

    p = cmd("dump-scores", cmd_dump_scores, "per-token score contributions as CSV", config=False)
    p.add_argument("--model", required=True)
    p.add_argument("--query", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--passage")
    g.add_argument("--passage-id")
    p.add_argument("--vocab", help="vocab file (default: from the manifest's corpus dir)")
    p.add_argument("--config")
    p.add_argument("--output")

    p = cmd("run-experiment", cmd_run_experiment, "full in-memory experiment with all methods")
    p.add_argument("--seeds", type=int, nargs="+")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "func", None) is cmd_dump_scores and not (args.vocab or args.config):
        print("error: dump-scores needs --vocab or --config", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, EncoderError, MergeError, RetrievalError, EvalError, TrainingError,
            ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
