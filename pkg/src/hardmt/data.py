"""ST/MT triplets, hard multi-task mixing, and token-budget batching."""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import torch

from .errors import ConfigError, FormatError, ValidationError
from .vocab import PAD_ID, JointVocabulary, TokenSequence, upsample_text


class Origin(str, Enum):
    ST = "ST"
    MT = "MT"


@dataclass
class Triplet:
    x: TokenSequence
    y_src: TokenSequence
    y_tgt: TokenSequence
    origin: Origin
    utt_id: str = ""

    def key(self):
        return (self.origin.value, self.utt_id, tuple(self.x.ids), tuple(self.y_src.ids), tuple(self.y_tgt.ids))


def make_st_example(speech: TokenSequence, y_src, y_tgt, v_cross: JointVocabulary, utt_id="") -> Triplet:
    return Triplet(v_cross.map_speech(speech), y_src, y_tgt, Origin.ST, utt_id)


def make_mt_example(st: Triplet, factor: int, v_cross: JointVocabulary) -> Triplet:
    """MT twin of an ST example: the input becomes the up-sampled transcript."""
    if factor < 1:
        raise ConfigError(f"up-sampling factor must be >= 1, got {factor}")
    if st.origin is not Origin.ST:
        raise ValidationError(f"{st.utt_id}: expected an ST triplet, got {st.origin.value}")
    x = v_cross.map_text(upsample_text(st.y_src, factor))
    return Triplet(x, st.y_src, st.y_tgt, Origin.MT, st.utt_id)


def make_text_example(y_src, y_tgt, factor, v_cross: JointVocabulary, utt_id="") -> Triplet:
    """MT triplet from a bare text pair (external MT data)."""
    x = v_cross.map_text(upsample_text(y_src, factor))
    return Triplet(x, y_src, y_tgt, Origin.MT, utt_id)


def mix_datasets(st, mt, seed: int) -> list[Triplet]:
    """Concatenate ST and MT examples and shuffle; no task weighting."""
    data = list(st) + list(mt)
    names = {t.x.vocab_name for t in data}
    if len(names) > 1:
        raise ConfigError(f"triplets use different input vocabularies: {sorted(names)}")
    random.Random(seed).shuffle(data)
    return data


@dataclass
class Batch:
    x: torch.Tensor
    x_lens: torch.Tensor
    y_src: torch.Tensor
    y_src_lens: torch.Tensor
    y_tgt: torch.Tensor
    y_tgt_lens: torch.Tensor
    origins: list = field(default_factory=list)
    utt_ids: list = field(default_factory=list)

    MODEL_FIELDS = ("x", "x_lens", "y_src", "y_src_lens", "y_tgt", "y_tgt_lens")

    def __len__(self):
        return self.x.shape[0]

    def model_inputs(self) -> dict:
        """Everything the network sees; task origin is bookkeeping only."""
        return {k: getattr(self, k) for k in self.MODEL_FIELDS}

    def to(self, device):
        for k in self.MODEL_FIELDS:
            setattr(self, k, getattr(self, k).to(device))
        return self


def _pad(seqs):
    lens = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    out = torch.full((len(seqs), max(1, int(lens.max()) if len(seqs) else 1)), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return out, lens


def collate(triplets) -> Batch:
    x, xl = _pad([t.x.ids for t in triplets])
    s, sl = _pad([t.y_src.ids for t in triplets])
    g, gl = _pad([t.y_tgt.ids for t in triplets])
    return Batch(x, xl, s, sl, g, gl, [t.origin for t in triplets], [t.utt_id for t in triplets])


def batch(data, max_tokens: int, seed: int):
    """Length-bucketed batches under a padded-token budget.

    Each batch satisfies ``len(batch) * max(|x|) <= max_tokens``.  Returns
    ``(batches, skipped)``; triplets longer than the budget are never silently
    dropped but listed in ``skipped``.
    """
    if max_tokens < 1:
        raise ConfigError("max_tokens must be positive")
    rng = random.Random(seed)
    keyed = [(len(t.x), rng.random(), i) for i, t in enumerate(data)]
    skipped = [data[i] for n, _, i in keyed if n > max_tokens]
    order = sorted(k for k in keyed if k[0] <= max_tokens)
    groups, cur, cur_max = [], [], 0
    for n, _, i in order:
        new_max = max(cur_max, n)
        if cur and new_max * (len(cur) + 1) > max_tokens:
            groups.append(cur)
            cur, new_max = [], n
        cur.append(data[i])
        cur_max = new_max
    if cur:
        groups.append(cur)
    rng.shuffle(groups)
    return [collate(g) for g in groups], skipped


def epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch * 7919) % (2**31 - 1)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestRow:
    utt_id: str
    input: str
    src: str
    tgt: str


def read_manifest(path, check_paths: bool = True) -> list[ManifestRow]:
    """UTF-8 TSV with columns id, input (feature path or raw text), src, tgt."""
    path = Path(path)
    rows, seen = [], set()
    with open(path, encoding="utf-8", newline="") as f:
        for ln, rec in enumerate(csv.reader(f, delimiter="\t", quoting=csv.QUOTE_NONE), 1):
            if not rec or (ln == 1 and rec[0] == "id"):
                continue
            if len(rec) != 4:
                raise FormatError(f"{path}:{ln}: expected 4 columns, got {len(rec)}")
            row = ManifestRow(*rec)
            if row.utt_id in seen:
                raise FormatError(f"{path}:{ln}: duplicate id {row.utt_id!r}")
            seen.add(row.utt_id)
            if check_paths and row.input.endswith(".dsqf") and not (path.parent / row.input).exists():
                raise FormatError(f"{path}:{ln}: missing feature file {row.input}")
            rows.append(row)
    return rows


def write_manifest(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, delimiter="\t", quoting=csv.QUOTE_NONE, lineterminator="\n")
        w.writerow(["id", "input", "src", "tgt"])
        for r in rows:
            w.writerow([r.utt_id, r.input, r.src, r.tgt])


# ---------------------------------------------------------------------------
# triplet files: one JSON object per line


def save_triplets(path, triplets, refs=None):
    with open(path, "w", encoding="utf-8") as f:
        for i, t in enumerate(triplets):
            rec = {"id": t.utt_id, "origin": t.origin.value, "x": t.x.ids, "y_src": t.y_src.ids,
                   "y_tgt": t.y_tgt.ids, "vocabs": [t.x.vocab_name, t.y_src.vocab_name, t.y_tgt.vocab_name]}
            if refs is not None:
                rec["ref"] = refs[i]
            f.write(json.dumps(rec) + "\n")


def load_triplets(path):
    """Returns ``(triplets, refs)``; ``refs`` holds the optional reference strings."""
    triplets, refs = [], []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                vx, vs, vt = r.get("vocabs", ["cross", "src", "tgt"])
                triplets.append(Triplet(TokenSequence(vx, r["x"]), TokenSequence(vs, r["y_src"]),
                                        TokenSequence(vt, r["y_tgt"]), Origin(r["origin"]), r["id"]))
            except (KeyError, ValueError) as e:
                raise FormatError(f"{path}:{ln}: bad triplet record ({e})") from e
            refs.append(r.get("ref"))
    return triplets, refs
