"""End-to-end runs: data, pretrained base model, federated rounds, artifacts and reports."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import federation as fed
from .config import BUNDLED_PATTERNS, ExperimentSpec, validate_config
from .data import (
    DatasetSplit,
    Example,
    Tokenizer,
    build_tokenizer,
    corpus_fingerprint,
    load_corpus,
    partition,
    synth_pretraining_corpus,
    synth_sentiment,
    tokenize,
)
from .model import MicroMLM, load_checkpoint, pretrain_base, save_checkpoint, trainable_parameters
from .prompting import PatternSet, PromptTask, bundled_patterns, load_patterns
from .semisup import AuditRecord

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, violations: Sequence[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(violations))
        self.violations = list(violations)


@dataclass
class Setup:
    examples: list[Example]
    patterns: PatternSet
    tokenizer: Tokenizer
    base: MicroMLM
    split: DatasetSplit
    task: PromptTask
    fingerprint: str


def reserved_words(spec: ExperimentSpec, patterns: PatternSet) -> list[str]:
    """Natural-language words the synthetic vocabulary must avoid."""
    out: list[str] = []
    for text in patterns.verbalizer.all_words() + patterns.pattern_words() + list(spec.pretrain.carriers):
        out += [t for t in tokenize(text.replace("{x}", " ")) if t not in out]
    return out


def load_examples(spec: ExperimentSpec, patterns: PatternSet) -> list[Example]:
    d = spec.data
    if d.corpus is not None:
        return load_corpus(d.corpus)
    s = d.synthetic
    return synth_sentiment(s.n, s.vocab_size, s.signal_words_per_label, s.noise_rate, s.seed, reserved_words(spec, patterns))


def pretraining_texts(spec: ExperimentSpec, patterns: PatternSet, examples: Sequence[Example]) -> list[str]:
    s, p = spec.data.synthetic, spec.pretrain
    if s is None:
        return [e.text for e in examples]
    return synth_pretraining_corpus(
        p.documents,
        s.vocab_size,
        s.signal_words_per_label,
        patterns.verbalizer.words,
        p.carriers,
        p.cue_rate,
        seed=p.seed + 1_000_003,
        exclude=reserved_words(spec, patterns),
        known_fraction=p.known_fraction,
    )


def _cache_key(spec: ExperimentSpec, tokenizer: Tokenizer, texts: Sequence[str]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"model": asdict(spec.model), "pretrain": asdict(replace(spec.pretrain, cache_dir=None))}, sort_keys=True).encode())
    h.update("\n".join(tokenizer.vocab).encode())
    for t in texts:
        h.update(t.encode())
    return h.hexdigest()[:20]


def pretrained_base(spec: ExperimentSpec, tokenizer: Tokenizer, texts: Sequence[str], salient: Sequence[str] = ()) -> MicroMLM:
    """Pretrain the base model, or reuse an identical earlier result from the cache."""
    cfg = replace(spec.model, vocab_size=len(tokenizer))
    cache = None
    if spec.pretrain.cache_dir is not None:
        cache = Path(spec.pretrain.cache_dir) / f"base-{_cache_key(spec, tokenizer, texts)}.lpfl"
        if cache.is_file():
            log.info("reusing pretrained base %s", cache)
            return load_checkpoint(cache)[0]
    model = MicroMLM.initialize(cfg, seed=spec.pretrain.seed, mask_id=tokenizer.mask_id)
    p = spec.pretrain
    t0 = time.perf_counter()
    losses = pretrain_base(
        model, [tokenizer.encode(t) for t in texts], p.steps, p.mask_prob, p.seed, p.batch_size, p.lr,
        salient_ids=[tokenizer.index[w] for w in salient], salient_prob=p.salient_prob,
    )
    if losses:
        log.info("pretrained %d steps in %.0fs, final loss %.3f", p.steps, time.perf_counter() - t0, float(np.mean(losses[-50:])))
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        tmp = cache.with_suffix(".tmp")
        save_checkpoint(model, tmp, {"pretrain_losses_tail": losses[-50:]})
        tmp.replace(cache)
    return model


def prepare(spec: ExperimentSpec) -> Setup:
    bad = validate_config(spec)
    if bad:
        raise ConfigError(bad)
    d = spec.data
    patterns = bundled_patterns(d.patterns) if d.patterns in BUNDLED_PATTERNS else load_patterns(d.patterns)
    examples = load_examples(spec, patterns)
    texts = pretraining_texts(spec, patterns, examples)
    tokenizer = build_tokenizer(texts, spec.model.vocab_size, patterns.verbalizer.all_words(), patterns.pattern_words())
    base = pretrained_base(spec, tokenizer, texts, patterns.verbalizer.all_words())
    split = partition(examples, spec.fl.clients, spec.fl.labeled_fraction, d.val_size, spec.seed, d.test_size)
    task = PromptTask.from_set(patterns, tokenizer, spec.model.max_len)
    return Setup(examples, patterns, tokenizer, base, split, task, corpus_fingerprint(examples))


# reports ------------------------------------------------------------------------


def annotation_error_rate(records: Sequence[AuditRecord | dict], hidden: dict[int, int]) -> float | None:
    """Share of annotated examples whose argmax soft label differs from the hidden label."""
    if not records:
        return None
    wrong = 0
    for r in records:
        soft = r["soft_label"] if isinstance(r, dict) else r.soft_label
        ex_id = r["example_id"] if isinstance(r, dict) else r.example_id
        wrong += int(np.argmax(soft)) != hidden[ex_id]
    return wrong / len(records)


def build_report(spec: ExperimentSpec, setup: Setup, result: fed.ExperimentResult, initial_val: float) -> dict:
    model = setup.base
    _, count, ratio = trainable_parameters(model, spec.fl.mode)
    cost = fed.comm_cost(spec.fl, model.config)
    hist = result.history
    fp_count = model.config.fp_parameter_count()
    return {
        "arm": spec.fl.arm,
        "clients": spec.fl.clients,
        "labeled_fraction": spec.fl.labeled_fraction,
        "seed": spec.seed,
        "dataset_fingerprint": setup.fingerprint,
        "test_acc": result.test_acc,
        "test_size": len(setup.split.test),
        "initial_val_acc": initial_val,
        "val_curve": [m.val_acc for m in hist],
        "pattern_weights": result.pattern_weights,
        "bytes_up": sum(m.bytes_up for m in hist),
        "bytes_down": sum(m.bytes_down for m in hist),
        "bytes_total": sum(m.bytes_up + m.bytes_down for m in hist),
        "payload_per_client": cost["payload_per_client"],
        "payload_ratio": cost["payload_per_client"] / (8 * fp_count),
        "lp_to_fp_ratio": cost["lp_to_fp_ratio"],
        "trainable_parameters": count,
        "trainable_ratio": count / fp_count,
        "lp_fp_parameter_ratio": ratio,
        "annotated": len(result.audit),
        "annotation_error_rate": annotation_error_rate(result.audit, setup.split.hidden_labels),
    }


# running --------------------------------------------------------------------------


def _checkpoint_path(out: Path, round_: int) -> Path:
    return out / "checkpoints" / f"round_{round_:03d}.lpfl"


def latest_checkpoint(out: str | Path) -> tuple[int, Path] | None:
    found = sorted((Path(out) / "checkpoints").glob("round_*.lpfl"))
    if not found:
        return None
    last = found[-1]
    return int(last.stem.split("_")[1]), last


def _read_audit(path: Path, upto_round: int) -> list[AuditRecord]:
    if not path.is_file():
        return []
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        d = json.loads(line)
        if d["round"] <= upto_round:
            out.append(AuditRecord(d["round"], d["client"], d["example_id"], tuple(d["soft_label"]), tuple(d["pattern_weights"])))
    return out


def run(spec: ExperimentSpec, resume: bool = False, setup: Setup | None = None, figures: bool = True) -> dict:
    """Execute one arm end to end and write its artifacts under ``spec.out``.

    With ``resume`` the latest round checkpoint in the output directory, if
    any, is the starting point.
    """
    setup = setup or prepare(spec)
    out = Path(spec.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    pattern_ids = [p.id for p in setup.patterns.patterns]
    audit_path = out / "audit.jsonl"
    (out / "config.json").write_text(json.dumps(spec.to_json(), indent=2) + "\n", encoding="utf-8")
    (out / "split.json").write_text(json.dumps(setup.split.manifest()) + "\n", encoding="utf-8")

    model = setup.base.replica()
    model.set_mode(spec.fl.mode)
    resume_state = None
    previous: list[AuditRecord] = []
    found = latest_checkpoint(out) if resume else None
    if found is not None:
        g, path = found
        model, server, clients = fed.load_run_state(path)
        model.set_mode(spec.fl.mode)
        resume_state = (server, clients)
        previous = _read_audit(audit_path, g)
        log.info("resuming %s after round %d", out, g)
    with open(audit_path, "w", encoding="utf-8") as fh:
        for r in previous:
            fh.write(r.to_json() + "\n")

    def audit(r: AuditRecord) -> None:
        with open(audit_path, "a", encoding="utf-8") as fh:
            fh.write(r.to_json() + "\n")

    def on_round(server: fed.ServerState, clients: list[fed.ClientState]) -> None:
        fed.save_run_state(_checkpoint_path(out, server.round), model, server, clients)
        fed.write_metrics_csv(out / "metrics.csv", server.history, pattern_ids)

    t0 = time.perf_counter()
    if resume_state is None:
        initial_val = fed.evaluate(model, setup.task, setup.split.validation, combine=spec.policy.combine)[1]
    else:
        initial_val = float(json.loads((out / "initial.json").read_text())["initial_val_acc"])
    (out / "initial.json").write_text(json.dumps({"initial_val_acc": initial_val}) + "\n", encoding="utf-8")
    result = fed.run_experiment(model, setup.split, setup.task, spec.fl, spec.policy, on_round, audit, resume_state)
    result.audit[:0] = previous
    log.info("%s finished in %.0fs: test_acc=%.4f", spec.fl.arm, time.perf_counter() - t0, result.test_acc)

    fed.write_metrics_csv(out / "metrics.csv", result.history, pattern_ids)
    save_checkpoint(model, out / "final.lpfl", {"arm": spec.fl.arm, "round": result.server.round})
    report = build_report(spec, setup, result, initial_val)
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    if figures:
        from .plots import plot_run

        plot_run(result.history, initial_val, out / "validation.png", title=f"{spec.fl.arm}, K={spec.fl.clients}")
    return report


# comparison -----------------------------------------------------------------------

COMPARE_COLUMNS = ("arm", "clients", "labeled_fraction", "test_acc", "delta_vs_first", "bytes_total", "payload_ratio")


def compare(reports: Sequence[dict]) -> list[dict]:
    """One row per report; accuracy deltas are relative to the first report."""
    if not reports:
        raise ValueError("nothing to compare")
    prints = {r["dataset_fingerprint"] for r in reports}
    if len(prints) > 1:
        raise ValueError(f"reports come from different datasets: {', '.join(sorted(prints))}")
    ref = reports[0]["test_acc"]
    return [
        {
            "arm": r["arm"],
            "clients": r["clients"],
            "labeled_fraction": r["labeled_fraction"],
            "test_acc": r["test_acc"],
            "delta_vs_first": r["test_acc"] - ref,
            "bytes_total": r["bytes_total"],
            "payload_ratio": r["payload_ratio"],
        }
        for r in reports
    ]


def write_table(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def format_table(rows: Sequence[dict]) -> str:
    lines = ["\t".join(COMPARE_COLUMNS)]
    for r in rows:
        lines.append("\t".join(
            f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in COMPARE_COLUMNS
        ))
    return "\n".join(lines)


def load_report(path: str | Path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    return json.loads(p.read_text(encoding="utf-8"))
