"""Synthetic grid tasks and the three-stage curation pipeline.

Two families:

* lookup: the question names a crop region and a cell inside it; the pooled
  question image only reveals per-block symbol multisets, so the exact cell
  content is hidden. The CoT shows the full-resolution crop and states its
  contents (the observation).
* count: row/column removal steps applied to a grid, one auxiliary image per
  step showing the updated grid, per-step counts of a target symbol as
  observations, final count as the answer.

Curation: stage 1 keeps samples a pooled-view exhaustive judge cannot answer,
stage 2 keeps samples an aux-image judge answers correctly (deliberately
corrupted images fail here), stage 3 wraps the observation spans in
delimiter tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from itertools import permutations

import numpy as np

from . import vocab

POOL = 2  # pooling factor of the question-image embedder

SCHEMA_VERSION = 1

Grid = list  # list of rows, each a list of symbol strings


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# sample structure
# ---------------------------------------------------------------------------

@dataclass
class TextSeg:
    tokens: list

    def to_dict(self):
        return {"type": "text", "tokens": list(self.tokens)}


@dataclass
class ImageSeg:
    grid: Grid
    bbox: tuple | None = None  # (r0, c0, r1, c1) inclusive, absolute coords

    def to_dict(self):
        return {"type": "image", "grid": [list(r) for r in self.grid],
                "bbox": list(self.bbox) if self.bbox is not None else None}


def _seg_from_dict(d):
    if d["type"] == "text":
        return TextSeg(list(d["tokens"]))
    return ImageSeg([list(r) for r in d["grid"]],
                    tuple(d["bbox"]) if d["bbox"] is not None else None)


@dataclass
class ToySample:
    family: str
    question_tokens: list
    question_grid: Grid
    cot: list  # TextSeg | ImageSeg, interleaved
    observation_spans: list  # [start, end) ranges over the concatenated cot text
    answer_tokens: list
    gold: list  # tokens inside the boxed span
    lookup: dict | None = None  # {"bbox": (r0,c0,r1,c1), "cell": (r,c)}
    count: dict | None = None  # {"target": sym, "steps": [(kind, arg), ...]}
    aux_crop: dict | None = None  # {"bbox": ..., "cells": grid} as shown in the CoT
    corrupted: bool = False
    tagged: bool = False

    def cot_text(self) -> list:
        out = []
        for seg in self.cot:
            if isinstance(seg, TextSeg):
                out.extend(seg.tokens)
        return out

    def to_dict(self):
        d = {
            "family": self.family,
            "question_tokens": list(self.question_tokens),
            "grid": [list(r) for r in self.question_grid],
            "cot": [seg.to_dict() for seg in self.cot],
            "observation_spans": [list(s) for s in self.observation_spans],
            "answer_tokens": list(self.answer_tokens),
            "gold": list(self.gold),
            "lookup": None,
            "count": None,
            "aux_crop": None,
            "corrupted": self.corrupted,
            "tagged": self.tagged,
        }
        if self.lookup:
            d["lookup"] = {"bbox": list(self.lookup["bbox"]), "cell": list(self.lookup["cell"])}
        if self.count:
            d["count"] = {"target": self.count["target"],
                          "steps": [[k, a] for k, a in self.count["steps"]]}
        if self.aux_crop:
            d["aux_crop"] = {"bbox": list(self.aux_crop["bbox"]),
                             "cells": [list(r) for r in self.aux_crop["cells"]]}
        return d

    @staticmethod
    def from_dict(d):
        lk = d.get("lookup")
        ct = d.get("count")
        ac = d.get("aux_crop")
        return ToySample(
            family=d["family"],
            question_tokens=list(d["question_tokens"]),
            question_grid=[list(r) for r in d["grid"]],
            cot=[_seg_from_dict(s) for s in d["cot"]],
            observation_spans=[tuple(s) for s in d["observation_spans"]],
            answer_tokens=list(d["answer_tokens"]),
            gold=list(d["gold"]),
            lookup={"bbox": tuple(lk["bbox"]), "cell": tuple(lk["cell"])} if lk else None,
            count={"target": ct["target"], "steps": [(k, a) for k, a in ct["steps"]]} if ct else None,
            aux_crop={"bbox": tuple(ac["bbox"]), "cells": [list(r) for r in ac["cells"]]} if ac else None,
            corrupted=bool(d.get("corrupted", False)),
            tagged=bool(d.get("tagged", False)),
        )


@dataclass
class DatasetRecord:
    sample_id: int
    sample: ToySample
    provenance: dict = field(default_factory=dict)

    def to_dict(self):
        d = self.sample.to_dict()
        d["schema_version"] = SCHEMA_VERSION
        d["id"] = self.sample_id
        d["provenance"] = dict(self.provenance)
        return d

    @staticmethod
    def from_dict(d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise DatasetError(f"unsupported schema_version {d.get('schema_version')}")
        return DatasetRecord(d["id"], ToySample.from_dict(d), dict(d.get("provenance", {})))


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

def crop_grid(grid: Grid, bbox) -> Grid:
    r0, c0, r1, c1 = bbox
    return [row[c0:c1 + 1] for row in grid[r0:r1 + 1]]


def pooled_blocks(grid: Grid) -> dict:
    """Per 2x2 block multiset of symbols, keyed by block coordinates."""
    R, C = len(grid), len(grid[0])
    out = {}
    for bi in range(R // POOL):
        for bj in range(C // POOL):
            cells = [grid[bi * POOL + di][bj * POOL + dj]
                     for di in range(POOL) for dj in range(POOL)]
            out[(bi, bj)] = tuple(sorted(cells))
    return out


def apply_removals(grid: Grid, steps) -> list:
    """Grids after each removal step; cells become vocab.EMPTY."""
    cur = [list(r) for r in grid]
    states = []
    for kind, arg in steps:
        if kind == "sym":
            cur = [[vocab.EMPTY if s == arg else s for s in row] for row in cur]
        elif kind == "row":
            cur = [([vocab.EMPTY] * len(row) if i == arg else list(row))
                   for i, row in enumerate(cur)]
        elif kind == "col":
            cur = [[vocab.EMPTY if j == arg else s for j, s in enumerate(row)] for row in cur]
        else:
            raise ValueError(f"unknown removal step kind: {kind}")
        states.append([list(r) for r in cur])
    return states


def count_symbol(grid: Grid, sym: str) -> int:
    return sum(row.count(sym) for row in grid)


# ---------------------------------------------------------------------------
# sample assembly
# ---------------------------------------------------------------------------

def make_lookup_sample(grid: Grid, bbox, cell) -> ToySample:
    """Deterministic lookup sample from explicit grid, crop bbox, queried cell."""
    r0, c0, r1, c1 = bbox
    qr, qc = cell
    if not (0 <= r0 <= qr <= r1 < len(grid) and 0 <= c0 <= qc <= c1 < len(grid[0])):
        raise ValueError(f"cell {cell} outside crop {bbox} or grid")
    crop = crop_grid(grid, bbox)
    d = vocab.digit
    question = [vocab.BOS, "lookup", "region", d(r0), d(c0), d(r1), d(c1),
                "cell", d(qr), d(qc)]
    flat = [s for row in crop for s in row]
    rationale = TextSeg(["inspect", "region"])
    obs_text = TextSeg(["crop", "shows"] + flat)
    span_start = len(rationale.tokens) + 2
    answer = grid[qr][qc]
    return ToySample(
        family="lookup",
        question_tokens=question,
        question_grid=[list(r) for r in grid],
        cot=[rationale, ImageSeg(crop, tuple(bbox)), obs_text],
        observation_spans=[(span_start, span_start + len(flat))],
        answer_tokens=["answer", "is", vocab.BOXED, answer, vocab.BOX_CLOSE, vocab.EOS],
        gold=[answer],
        lookup={"bbox": tuple(bbox), "cell": (qr, qc)},
        aux_crop={"bbox": tuple(bbox), "cells": crop},
    )


def make_count_sample(grid: Grid, steps, target: str) -> ToySample:
    """Deterministic count sample from explicit grid, removal steps, target."""
    if not steps:
        raise ValueError("count sample needs at least one removal step")
    d = vocab.digit
    question = [vocab.BOS, "count", target, "after"]
    for kind, arg in steps:
        if kind == "sym":
            question += ["remove", arg]
        else:
            question += ["remove", kind, d(arg)]
    states = apply_removals(grid, steps)
    cot, spans, cursor = [], [], 0
    for (kind, arg), state in zip(steps, states):
        step_tokens = ["remove", arg] if kind == "sym" else ["remove", kind, d(arg)]
        cot.append(TextSeg(step_tokens))
        cursor += len(step_tokens)
        cot.append(ImageSeg(state, None))
        cnt = count_symbol(state, target)
        if cnt > 9:
            raise ValueError(f"count {cnt} exceeds single-digit answers")
        cot.append(TextSeg(["now", d(cnt)]))
        spans.append((cursor + 1, cursor + 2))
        cursor += 2
    final = count_symbol(states[-1], target)
    return ToySample(
        family="count",
        question_tokens=question,
        question_grid=[list(r) for r in grid],
        cot=cot,
        observation_spans=spans,
        answer_tokens=["answer", "is", vocab.BOXED, d(final), vocab.BOX_CLOSE, vocab.EOS],
        gold=[d(final)],
        count={"target": target, "steps": [(k, a) for k, a in steps]},
    )


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

# per-block composition of lookup grids: (name, weight); "uniform" blocks are
# pooled-solvable and exist to exercise the stage-1 drop path
_BLOCK_KINDS = [("uniform", 0.05), ("triple", 0.60), ("pair", 0.25), ("distinct", 0.10)]


def _fill_block(rng: np.random.Generator) -> list:
    kinds, weights = zip(*_BLOCK_KINDS)
    kind = rng.choice(kinds, p=weights)
    syms = list(vocab.SYMBOLS)
    if kind == "uniform":
        cells = [syms[rng.integers(len(syms))]] * 4
    elif kind == "triple":
        maj, minor = rng.choice(len(syms), size=2, replace=False)
        cells = [syms[maj]] * 3 + [syms[minor]]
    elif kind == "pair":
        maj, o1, o2 = rng.choice(len(syms), size=3, replace=False)
        cells = [syms[maj]] * 2 + [syms[o1], syms[o2]]
    else:
        cells = [syms[i] for i in rng.choice(len(syms), size=4, replace=False)]
    order = rng.permutation(4)
    return [cells[i] for i in order]


def generate_lookup_task(rng: np.random.Generator, grid_size: int = 4,
                         crop_size: int = 2) -> ToySample:
    """Crops are aligned to pooling blocks, so one pooled patch carries the
    whole (lossy) evidence for the queried region."""
    if crop_size > grid_size:
        raise ValueError("crop does not fit in grid")
    R = C = grid_size
    grid = [[None] * C for _ in range(R)]
    for bi in range(R // POOL):
        for bj in range(C // POOL):
            block = _fill_block(rng)
            for k, (di, dj) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
                grid[bi * POOL + di][bj * POOL + dj] = block[k]
    r0 = POOL * int(rng.integers(0, (R - crop_size) // POOL + 1))
    c0 = POOL * int(rng.integers(0, (C - crop_size) // POOL + 1))
    bbox = (r0, c0, r0 + crop_size - 1, c0 + crop_size - 1)
    qr = r0 + int(rng.integers(crop_size))
    qc = c0 + int(rng.integers(crop_size))
    return make_lookup_sample(grid, bbox, (qr, qc))


def generate_count_task(rng: np.random.Generator, grid_size: int = 4,
                        removal_steps: int = 2) -> ToySample:
    if removal_steps < 1:
        raise ValueError("need at least one removal step")
    R = C = grid_size
    for _ in range(64):
        syms = [vocab.SYMBOLS[i] for i in rng.choice(len(vocab.SYMBOLS), size=4, replace=False)]
        grid = [[syms[rng.integers(len(syms))] for _ in range(C)] for _ in range(R)]
        target = syms[int(rng.integers(len(syms)))]
        lines = [("row", i) for i in range(R)] + [("col", j) for j in range(C)]
        picks = rng.choice(len(lines), size=removal_steps, replace=False)
        steps = [lines[i] for i in picks]
        if count_symbol(grid, target) > 9:
            continue
        return make_count_sample(grid, steps, target)
    raise RuntimeError("could not generate a count sample within digit range")


def corrupt_sample(sample: ToySample, rng: np.random.Generator) -> ToySample:
    """Flip one cell of the decisive auxiliary image so the strong judge fails."""
    s = ToySample.from_dict(sample.to_dict())
    s.corrupted = True
    if s.family == "lookup":
        r0, c0, _, _ = s.lookup["bbox"]
        qr, qc = s.lookup["cell"]
        truth = s.aux_crop["cells"][qr - r0][qc - c0]
        others = [x for x in vocab.SYMBOLS if x != truth]
        flip = others[int(rng.integers(len(others)))]
        s.aux_crop["cells"][qr - r0][qc - c0] = flip
        for seg in s.cot:
            if isinstance(seg, ImageSeg):
                seg.grid[qr - r0][qc - c0] = flip
    else:
        target = s.count["target"]
        last = [seg for seg in s.cot if isinstance(seg, ImageSeg)][-1]
        cells = [(i, j) for i, row in enumerate(last.grid) for j, x in enumerate(row)
                 if x == target]
        if cells:
            i, j = cells[int(rng.integers(len(cells)))]
            others = [x for x in vocab.SYMBOLS if x != target]
            last.grid[i][j] = others[int(rng.integers(len(others)))]
        else:
            i, j = int(rng.integers(len(last.grid))), int(rng.integers(len(last.grid[0])))
            last.grid[i][j] = target
    return s


# ---------------------------------------------------------------------------
# judges
# ---------------------------------------------------------------------------

def weak_candidates(sample: ToySample) -> set:
    """All answers consistent with the question plus the pooled question image."""
    blocks = pooled_blocks(sample.question_grid)
    if sample.family == "lookup":
        qr, qc = sample.lookup["cell"]
        return set(blocks[(qr // POOL, qc // POOL)])
    target = sample.count["target"]
    steps = sample.count["steps"]
    sym_removed = {a for k, a in steps if k == "sym"}
    rows_removed = {a for k, a in steps if k == "row"}
    cols_removed = {a for k, a in steps if k == "col"}
    totals = {0}
    for (bi, bj), multiset in blocks.items():
        contribs = set()
        for arr in set(permutations(multiset)):
            n = 0
            for k, (di, dj) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
                r, c = bi * POOL + di, bj * POOL + dj
                if arr[k] != target or arr[k] in sym_removed:
                    continue
                if r in rows_removed or c in cols_removed:
                    continue
                n += 1
            contribs.add(n)
        totals = {t + c for t in totals for c in contribs}
    return {str(t) for t in totals}


def weak_judge_answer(sample: ToySample):
    """Pooled-view exhaustive judge: answers only when uniquely determined."""
    cands = weak_candidates(sample)
    if len(cands) == 1:
        return next(iter(cands))
    return None


def strong_judge_answer(sample: ToySample):
    """Aux-image judge: reads the shown auxiliary images, nothing else."""
    if sample.family == "lookup":
        shown = sample.aux_crop
        if not shown or not shown["cells"]:
            return None
        r0, c0, r1, c1 = shown["bbox"]
        qr, qc = sample.lookup["cell"]
        if not (r0 <= qr <= r1 and c0 <= qc <= c1):
            return None
        return shown["cells"][qr - r0][qc - c0]
    images = [seg for seg in sample.cot if isinstance(seg, ImageSeg)]
    if not images:
        return None
    return str(count_symbol(images[-1].grid, sample.count["target"]))


def stage1_filter(sample: ToySample, judge=weak_judge_answer) -> bool:
    """Keep iff the weak judge fails (wrong answer or abstention)."""
    ans = judge(sample)
    return ans is None or [ans] != list(sample.gold)


def stage2_filter(sample: ToySample, judge=strong_judge_answer) -> bool:
    """Keep iff the strong judge answers correctly from the aux images."""
    ans = judge(sample)
    return ans is not None and [ans] == list(sample.gold)


def stage3_tag_observations(sample: ToySample) -> ToySample:
    """Insert observation delimiters around the constructed spans.

    Only delimiter tokens are added; every other token stays put. Spans are
    re-indexed to the tagged stream.
    """
    spans = sorted(sample.observation_spans)
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        if b0 < a1:
            raise ValueError(f"overlapping observation spans {(a0, a1)} and {(b0, b1)}")
    s = ToySample.from_dict(sample.to_dict())
    if not spans:
        s.tagged = True
        return s
    new_spans = []
    offset = 0  # tokens inserted so far
    span_iter = iter(spans)
    cur = next(span_iter, None)
    cursor = 0  # position in the original text stream
    for seg in s.cot:
        if not isinstance(seg, TextSeg):
            continue
        out = []
        for i, tok in enumerate(seg.tokens):
            g = cursor + i
            if cur and g == cur[0]:
                out.append(vocab.OBS_START)
                offset += 1
                new_spans.append((g + offset, g + offset + (cur[1] - cur[0])))
            out.append(tok)
            if cur and g == cur[1] - 1:
                out.append(vocab.OBS_END)
                offset += 1
                cur = next(span_iter, None)
        cursor += len(seg.tokens)
        seg.tokens = out
    if cur is not None:
        raise ValueError(f"observation span {cur} crosses a segment boundary")
    s.observation_spans = new_spans
    s.tagged = True
    return s


def strip_observation_tags(tokens: list) -> list:
    return [t for t in tokens if t not in (vocab.OBS_START, vocab.OBS_END)]


# ---------------------------------------------------------------------------
# curation pipeline
# ---------------------------------------------------------------------------

JUDGES = {"pooled-exhaustive": weak_judge_answer, "aux-exact": strong_judge_answer}


@dataclass
class CurationConfig:
    sample_count: int = 5000
    seed: int = 0
    weak_judge: str = "pooled-exhaustive"
    strong_judge: str = "aux-exact"
    corrupt_fraction: float = 0.10
    lookup_fraction: float = 0.80
    lookup_grid: int = 4
    count_grid: int = 4
    count_steps: int = 2


def generate_raw(cfg: CurationConfig) -> list:
    """Pre-curation samples, one spawned rng stream per sample."""
    root = np.random.SeedSequence(cfg.seed)
    out = []
    for child in root.spawn(cfg.sample_count):
        rng = np.random.default_rng(child)
        if rng.random() < cfg.lookup_fraction:
            s = generate_lookup_task(rng, cfg.lookup_grid)
        else:
            s = generate_count_task(rng, cfg.count_grid, cfg.count_steps)
        if rng.random() < cfg.corrupt_fraction:
            s = corrupt_sample(s, rng)
        out.append(s)
    return out


def curate(samples, cfg: CurationConfig):
    """Run the three filter/tag stages; returns (records, stats)."""
    weak = JUDGES[cfg.weak_judge]
    strong = JUDGES[cfg.strong_judge]
    records, stats = [], {"raw": len(samples), "stage1_dropped": 0, "stage2_dropped": 0}
    for s in samples:
        weak_ans = weak(s)
        if not stage1_filter(s, weak):
            stats["stage1_dropped"] += 1
            continue
        strong_ans = strong(s)
        if not stage2_filter(s, strong):
            stats["stage2_dropped"] += 1
            continue
        tagged = stage3_tag_observations(s)
        records.append(DatasetRecord(
            sample_id=len(records),
            sample=tagged,
            provenance={
                "generator": s.family,
                "corrupted": s.corrupted,
                "weak": "abstain" if weak_ans is None else ("correct" if [weak_ans] == list(s.gold) else "wrong"),
                "strong": "correct",
            },
        ))
    stats["curated"] = len(records)
    return records, stats


def build_corpus(cfg: CurationConfig):
    return curate(generate_raw(cfg), cfg)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def write_dataset(records, path):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec.to_dict(), sort_keys=True, separators=(",", ":")))
            f.write("\n")


def read_dataset(path):
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(DatasetRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as e:
                raise DatasetError(f"{path}: malformed record at line {lineno}: {e}") from e
    return records
