"""Decode manifests with a trained model and write score reports."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

from .decode import greedy_decode
from .model import SURTModel
from .scoring import CorpusScore, permutation_wer
from .train import Example, collate

REPORT_VERSION = "surt-score-v1"


def decode_examples(model: SURTModel, examples: Sequence[Example], batch_frames: int = 2000, max_symbols: int = 5) -> list[dict]:
    """Per-utterance decoding records in input order."""
    order = sorted(range(len(examples)), key=lambda i: examples[i].n_frames)
    out: list[dict | None] = [None] * len(examples)
    pos = 0
    while pos < len(order):
        group = [order[pos]]
        pos += 1
        while pos < len(order) and examples[order[pos]].n_frames * (len(group) + 1) <= batch_frames:
            group.append(order[pos])
            pos += 1
        X, lens, _ = collate([examples[i] for i in group])
        f, f_lens = model.infer_f(X, lens)
        for b, i in enumerate(group):
            ex = examples[i]
            streams = [f[s, b, : f_lens[b]] for s in range(f.shape[0])]
            hyps, incidents = greedy_decode(streams, model, max_symbols)
            refs = ex.labels
            tokens = [h.tokens for h in hyps]
            if len(tokens) < len(refs):
                tokens += [[] for _ in range(len(refs) - len(tokens))]
            report = permutation_wer(refs, tokens)
            out[i] = {
                "id": ex.id,
                "refs": refs,
                "hyps": [h.tokens for h in hyps],
                "frames": [h.frames for h in hyps],
                "scores": [h.score for h in hyps],
                "cap_incidents": incidents,
                "score": report.to_dict(),
                "_report": report,
            }
    return out  # type: ignore[return-value]


def score_condition(records: Sequence[dict]) -> dict:
    agg = CorpusScore()
    for r in records:
        agg.add(r["_report"])
    s, i, d = agg.totals()
    return {
        "utterances": len(records),
        "n_ref": agg.n_ref,
        "sub": s,
        "ins": i,
        "del": d,
        "errors": agg.errors,
        "wer": agg.wer,
        "cap_incidents": int(sum(r["cap_incidents"] for r in records)),
    }


def format_table(conditions: dict[str, dict], title: str = "") -> str:
    """Plain-text table with one column per condition."""
    names = list(conditions)
    rows = [("WER (%)", lambda c: f"{100 * c['wer']:.2f}"), ("errors", lambda c: str(c["errors"])), ("ref tokens", lambda c: str(c["n_ref"])), ("sub/ins/del", lambda c: f"{c['sub']}/{c['ins']}/{c['del']}"), ("utterances", lambda c: str(c["utterances"]))]
    width = max([12] + [len(n) + 2 for n in names])
    lines = []
    if title:
        lines.append(title)
    lines.append("metric".ljust(14) + "".join(n.rjust(width) for n in names))
    for label, fn in rows:
        lines.append(label.ljust(14) + "".join(fn(conditions[n]).rjust(width) for n in names))
    return "\n".join(lines) + "\n"


def write_reports(out_dir: Path | str, per_condition: dict[str, list[dict]], title: str = "") -> dict:
    """Write score.json, score.txt and one hypothesis dump per condition."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {name: score_condition(recs) for name, recs in per_condition.items()}
    doc = {
        "format": REPORT_VERSION,
        "conditions": summary,
        "utterances": {name: [{k: v for k, v in r.items() if k not in ("_report", "frames", "scores")} for r in recs] for name, recs in per_condition.items()},
    }
    (out / "score.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (out / "score.txt").write_text(format_table(summary, title), encoding="utf-8")
    for name, recs in per_condition.items():
        with (out / f"hyps_{_slug(name)}.jsonl").open("w", encoding="utf-8") as fh:
            for r in recs:
                rec = {"id": r["id"], "hyps": r["hyps"], "frames": r["frames"], "scores": [round(float(s), 10) for s in r["scores"]]}
                fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    return summary


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def condition_name(records: Sequence[dict], fallback: str) -> str:
    taus = {float(r.get("tau", 0.0)) for r in records}
    if len(taus) == 1:
        return f"tau={taus.pop():g}"
    return fallback


def untrained_wer(model: SURTModel, examples: Sequence[Example]) -> float:
    recs = decode_examples(model, examples)
    return score_condition(recs)["wer"]

