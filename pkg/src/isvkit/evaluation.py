"""Trials, the three EERs, and score-distribution export.

Trial types and which of them each EER uses::

               target  zero_effort  replay
    ZE-EER       1         0
    PAD-EER      1                    0
    ISV-EER      1         0          0

The enrollment side of every trial is bona fide.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CompositionError, InsufficientTrialsError, LabelError, MissingUtteranceError,
)

TARGET, ZERO_EFFORT, REPLAY = "target", "zero_effort", "replay"
TRIAL_TYPES = (TARGET, ZERO_EFFORT, REPLAY)
BONAFIDE, SPOOF = "bonafide", "replay"

EER_SUBSETS = {
    "ze": (ZERO_EFFORT,),
    "pad": (REPLAY,),
    "isv": (ZERO_EFFORT, REPLAY),
}


@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    type: str

    def __post_init__(self):
        if self.type not in TRIAL_TYPES:
            raise LabelError(f"unknown trial type {self.type!r}")


def as_bonafide(labels):
    """Map spoof labels (strings, bools or 0/1) to a bool array, True for bona fide."""
    arr = np.asarray(labels)
    if arr.dtype.kind in "USO":
        bad = set(arr.tolist()) - {BONAFIDE, SPOOF}
        if bad:
            raise LabelError(f"unknown spoof labels {sorted(bad)}")
        return arr == BONAFIDE
    return arr.astype(bool)


def inbatch_pairs(speakers, bonafide):
    """Index form of :func:`compose_inbatch_trials`.

    Returns ``(enroll_idx, test_idx, type_codes)`` with codes indexing
    ``TRIAL_TYPES``. Ordered pairs ``i != j`` with a bona fide enrollment;
    different-speaker replayed tests are excluded.
    """
    speakers = np.asarray(speakers)
    bona = np.asarray(bonafide, dtype=bool)
    n = len(speakers)
    if n < 2:
        raise CompositionError("in-batch trials need at least 2 utterances")
    if not bona.any():
        raise CompositionError("batch has no bona fide utterance to enroll")
    ei, ti = np.nonzero(~np.eye(n, dtype=bool))
    same = speakers[ei] == speakers[ti]
    keep = bona[ei] & (bona[ti] | same)
    ei, ti, same = ei[keep], ti[keep], same[keep]
    codes = np.where(same, np.where(bona[ti], 0, 2), 1)
    return ei, ti, codes


def compose_inbatch_trials(speakers, spoof_labels, ids=None):
    """All valid ordered (enroll, test) trials within a batch."""
    ids = [str(i) for i in range(len(speakers))] if ids is None else list(ids)
    ei, ti, codes = inbatch_pairs(speakers, as_bonafide(spoof_labels))
    return [Trial(ids[e], ids[t], TRIAL_TYPES[c]) for e, t, c in zip(ei, ti, codes)]


@dataclass
class ScoreSet:
    scores: np.ndarray
    types: np.ndarray
    ids: list = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.types = np.asarray(self.types, dtype=object).reshape(-1)
        if len(self.scores) != len(self.types):
            raise CompositionError("scores and types differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise CompositionError("scores must be finite")
        bad = set(self.types.tolist()) - set(TRIAL_TYPES)
        if bad:
            raise LabelError(f"unknown trial types {sorted(bad)}")

    def __len__(self):
        return len(self.scores)

    def of_type(self, t):
        return self.scores[self.types == t]

    def counts(self):
        return {t: int(np.sum(self.types == t)) for t in TRIAL_TYPES}

    def sorted(self):
        """Copy in deterministic ``(score, type, id)`` order."""
        ids = self.ids if self.ids is not None else [""] * len(self)
        order = sorted(range(len(self)), key=lambda i: (self.scores[i], self.types[i], ids[i]))
        return ScoreSet(self.scores[order], self.types[order],
                        None if self.ids is None else [ids[i] for i in order])


def error_rates(target, nontarget, thresholds):
    """FAR and FRR at each threshold; a score equal to the threshold is accepted."""
    t = np.sort(np.asarray(target, dtype=np.float64))
    n = np.sort(np.asarray(nontarget, dtype=np.float64))
    far = (len(n) - np.searchsorted(n, thresholds, side="left")) / len(n)
    frr = np.searchsorted(t, thresholds, side="left") / len(t)
    return far, frr


def compute_eer(target, nontarget):
    """Equal error rate in percent and the threshold where it occurs.

    Every distinct score is a candidate threshold, plus one just above the
    maximum (accept nothing). The EER is linearly interpolated between the
    adjacent candidates where ``FAR - FRR`` changes sign.
    """
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    nontarget = np.asarray(nontarget, dtype=np.float64).reshape(-1)
    if len(target) == 0 or len(nontarget) == 0:
        raise InsufficientTrialsError(
            f"EER needs targets and non-targets (got {len(target)} and {len(nontarget)})")
    thr = np.unique(np.concatenate([target, nontarget]))
    thr = np.append(thr, np.nextafter(thr[-1], np.inf))
    far, frr = error_rates(target, nontarget, thr)
    d = far - frr
    k = int(np.argmax(d <= 0))  # d[0] = 1 and d[-1] = -1, so k >= 1
    if d[k] == 0:
        return 100.0 * far[k], float(thr[k])
    w = d[k - 1] / (d[k - 1] - d[k])
    eer = far[k - 1] + w * (far[k] - far[k - 1])
    return 100.0 * float(eer), float(thr[k - 1] + w * (thr[k] - thr[k - 1]))


@dataclass
class EvalReport:
    ze_eer: float = None
    pad_eer: float = None
    isv_eer: float = None
    thresholds: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def eers(self):
        return {"ze": self.ze_eer, "pad": self.pad_eer, "isv": self.isv_eer}

    def row(self):
        """Values for the ``ZE-EER PAD-EER ISV-EER`` columns; ``-`` marks an absent type."""
        return ["-" if v is None else f"{v:.4f}" for v in (self.ze_eer, self.pad_eer, self.isv_eer)]


def compute_three_eers(scoreset):
    """ZE-, PAD- and ISV-EER, each on exactly its subset of trial types.

    EERs whose non-target type is absent are reported as None.
    """
    targets = scoreset.of_type(TARGET)
    if len(targets) == 0:
        raise InsufficientTrialsError("score set has no target trials")
    report = EvalReport(counts=scoreset.counts())
    for name, nontypes in EER_SUBSETS.items():
        non = np.concatenate([scoreset.of_type(t) for t in nontypes])
        if len(non) == 0:
            continue
        eer, thr = compute_eer(targets, non)
        setattr(report, f"{name}_eer", eer)
        report.thresholds[name] = thr
    return report


def evaluate_system(scorer, trials, store, batch_size=4096):
    """Score every trial and compute the three EERs.

    ``scorer(enroll_items, test_items)`` returns one score per pair, where
    items are ``store[id]`` values. Returns ``(EvalReport, ScoreSet)``.
    """
    missing = sorted({i for tr in trials for i in (tr.enroll, tr.test) if i not in store})
    if missing:
        raise MissingUtteranceError(missing)
    scores = np.empty(len(trials))
    for start in range(0, len(trials), batch_size):
        chunk = trials[start:start + batch_size]
        enroll = [store[tr.enroll] for tr in chunk]
        test = [store[tr.test] for tr in chunk]
        scores[start:start + len(chunk)] = np.asarray(scorer(enroll, test), dtype=np.float64)
    ss = ScoreSet(scores, [tr.type for tr in trials], [f"{tr.enroll}:{tr.test}" for tr in trials])
    return compute_three_eers(ss), ss


_COLORS = {TARGET: "#2b8a3e", ZERO_EFFORT: "#1971c2", REPLAY: "#e03131"}


def histogram_counts(scoreset, bins=50, value_range=None):
    if len(scoreset) == 0:
        raise CompositionError("empty score set")
    if value_range is None:
        value_range = (float(scoreset.scores.min()), float(scoreset.scores.max()))
        if value_range[0] == value_range[1]:
            value_range = (value_range[0] - 0.5, value_range[1] + 0.5)
    edges = np.histogram_bin_edges(scoreset.scores, bins=bins, range=value_range)
    counts = {t: np.histogram(scoreset.of_type(t), bins=edges)[0] for t in TRIAL_TYPES}
    return edges, counts


def export_histogram(scoreset, bins, path, value_range=None, title="score distribution"):
    """Write ``<path>.tsv`` (per-type bin counts) and ``<path>.svg``.

    Scores outside ``value_range`` are not counted.
    """
    edges, counts = histogram_counts(scoreset, bins, value_range)
    path = Path(path)
    tsv, svg = path.with_suffix(".tsv"), path.with_suffix(".svg")
    lines = ["bin_lo\tbin_hi\t" + "\t".join(TRIAL_TYPES)]
    for i in range(len(edges) - 1):
        row = [repr(float(edges[i])), repr(float(edges[i + 1]))]
        row += [str(int(counts[t][i])) for t in TRIAL_TYPES]
        lines.append("\t".join(row))
    tsv.write_text("\n".join(lines) + "\n")
    svg.write_text(_render_svg(edges, counts, title))
    return tsv, svg


def _render_svg(edges, counts, title, width=640, height=360, margin=40):
    # density per type so small trial types stay visible
    dens = {}
    for t, c in counts.items():
        tot = c.sum()
        dens[t] = c / tot if tot else c.astype(float)
    top = max(float(d.max()) for d in dens.values()) or 1.0
    pw, ph = width - 2 * margin, height - 2 * margin
    nb = len(edges) - 1

    def xy(i, v):
        return margin + pw * i / nb, margin + ph * (1 - v / top)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{margin}" y="20" font-size="14">{title}</text>',
           f'<line x1="{margin}" y1="{margin + ph}" x2="{margin + pw}" y2="{margin + ph}" stroke="black"/>']
    for k, (t, d) in enumerate(dens.items()):
        pts = []
        for i, v in enumerate(d):
            (x0, y), (x1, _) = xy(i, v), xy(i + 1, v)
            pts += [f"{x0:.2f},{y:.2f}", f"{x1:.2f},{y:.2f}"]
        out.append(f'<polyline fill="none" stroke="{_COLORS[t]}" stroke-width="1.5" '
                   f'points="{" ".join(pts)}"/>')
        out.append(f'<text x="{width - 150}" y="{20 + 16 * k}" font-size="12" '
                   f'fill="{_COLORS[t]}">{t} (n={int(counts[t].sum())})</text>')
    out.append(f'<text x="{margin}" y="{height - 10}" font-size="11">{edges[0]:.3g}</text>')
    out.append(f'<text x="{margin + pw - 30}" y="{height - 10}" font-size="11">{edges[-1]:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def validate_trials(trials, speaker_of, bonafide_of):
    """Check trial invariants against utterance labels; returns a list of problems."""
    problems = []
    for tr in trials:
        if not bonafide_of[tr.enroll]:
            problems.append(f"{tr.enroll}:{tr.test} enrollment is not bona fide")
        same = speaker_of[tr.enroll] == speaker_of[tr.test]
        bona = bonafide_of[tr.test]
        expected = TARGET if same and bona else REPLAY if same else ZERO_EFFORT if bona else None
        if expected != tr.type:
            problems.append(f"{tr.enroll}:{tr.test} labeled {tr.type}, expected {expected}")
    return problems
