"""Byte-level BPE: training, encoding, decoding and the vocab file format.

Token ids are laid out as::

    0..4        PAD, BOS, EOS, MASK, UNK
    5..260      the 256 single bytes
    261..       merges, in the order they were learned

Vocab file (UTF-8, one rule per line)::

    #hireformer-bbpe v1
    #special <PAD>=0 <BOS>=1 <EOS>=2 <MASK>=3 <UNK>=4
    Ġt he
    ...

Merge operands are written with the usual printable byte-to-unicode table so
that every line is valid UTF-8 and contains exactly one space.
"""
from __future__ import annotations

import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable

PAD, BOS, EOS, MASK, UNK = 0, 1, 2, 3, 4
SPECIALS = {"<PAD>": PAD, "<BOS>": BOS, "<EOS>": EOS, "<MASK>": MASK, "<UNK>": UNK}
N_SPECIAL = len(SPECIALS)
BYTE_OFFSET = N_SPECIAL
FIRST_MERGE_ID = BYTE_OFFSET + 256

_PRETOKEN = re.compile(r"""'(?:s|t|re|ve|m|ll|d)| ?[^\W\d_]+| ?\d+| ?[^\s\w]+| ?_+|\s+(?!\S)|\s+""")


def _bytes_to_unicode() -> dict[int, str]:
    keep = list(range(ord("!"), ord("~") + 1)) + list(range(0xA1, 0xAD)) + list(range(0xAE, 0x100))
    table = {}
    extra = 0
    for b in range(256):
        if b in keep:
            table[b] = chr(b)
        else:
            table[b] = chr(256 + extra)
            extra += 1
    return table


_B2U = _bytes_to_unicode()
_U2B = {v: k for k, v in _B2U.items()}


def pretokenize(text: str) -> list[bytes]:
    pieces = _PRETOKEN.findall(text)
    if sum(len(p) for p in pieces) != len(text):
        raise BPEError(f"pre-tokenizer lost characters in {text!r}")
    return [p.encode("utf-8") for p in pieces]


class BPEError(ValueError):
    pass


@dataclass
class Vocab:
    merges: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.token_bytes: list[bytes] = [b""] * N_SPECIAL + [bytes([b]) for b in range(256)]
        self.ranks: dict[tuple[int, int], int] = {}
        for left, right in self.merges:
            if left < BYTE_OFFSET or right < BYTE_OFFSET or max(left, right) >= len(self.token_bytes):
                raise BPEError(f"invalid merge ({left}, {right})")
            self.ranks[(left, right)] = len(self.token_bytes)
            self.token_bytes.append(self.token_bytes[left] + self.token_bytes[right])
        self.token_to_id = {tok: i for i, tok in enumerate(self.token_bytes) if i >= BYTE_OFFSET}
        self.token_to_id.update({name.encode(): i for name, i in SPECIALS.items()})
        self._cache: dict[bytes, list[int]] = {}

    @property
    def size(self) -> int:
        return len(self.token_bytes)

    # --- encoding ------------------------------------------------------------
    def _encode_word(self, word: bytes) -> list[int]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        ids = [BYTE_OFFSET + b for b in word]
        ranks = self.ranks
        while len(ids) > 1:
            best = None
            best_rank = None
            for i in range(len(ids) - 1):
                r = ranks.get((ids[i], ids[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            ids = ids[:best] + [best_rank] + ids[best + 2:]
        if len(self._cache) < 200_000:
            self._cache[word] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for word in pretokenize(text):
            out.extend(self._encode_word(word))
        return out

    def decode(self, ids: Iterable[int]) -> str:
        data = b"".join(self.token_bytes[i] for i in ids if i >= BYTE_OFFSET)
        return data.decode("utf-8", errors="replace")

    # --- persistence -----------------------------------------------------------
    def save(self, path) -> None:
        lines = ["#hireformer-bbpe v1",
                 "#special " + " ".join(f"{k}={v}" for k, v in SPECIALS.items())]
        for left, right in self.merges:
            lines.append(_printable(self.token_bytes[left]) + " " + _printable(self.token_bytes[right]))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or not lines[0].startswith("#hireformer-bbpe"):
            raise BPEError(f"{path}: not a vocab file")
        lookup = {bytes([b]): BYTE_OFFSET + b for b in range(256)}
        vocab_bytes = [bytes([b]) for b in range(256)]
        merges = []
        for lineno, line in enumerate(lines, 1):
            if line.startswith("#") or not line:
                if line.startswith("#special"):
                    found = dict(item.split("=") for item in line.split()[1:])
                    if {k: int(v) for k, v in found.items()} != SPECIALS:
                        raise BPEError(f"{path}:{lineno}: special ids differ from {SPECIALS}")
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise BPEError(f"{path}:{lineno}: expected two merge operands")
            left, right = (bytes(_U2B[c] for c in p) for p in parts)
            if left not in lookup or right not in lookup:
                raise BPEError(f"{path}:{lineno}: merge operand not yet defined")
            merges.append((lookup[left], lookup[right]))
            lookup[left + right] = FIRST_MERGE_ID + len(vocab_bytes) - 256
            vocab_bytes.append(left + right)
        return cls(merges)


def _printable(token: bytes) -> str:
    return "".join(_B2U[b] for b in token)


def train_bpe(corpus: Iterable[str], vocab_size: int) -> Vocab:
    """Learn merges greedily by pair frequency until ``vocab_size`` is reached.

    Pairs are counted within pre-tokens (a word with its leading space).
    Ties go to the lexicographically smallest ``(left bytes, right bytes)``.
    Training stops early once no pair occurs at least twice.  A pair whose
    concatenation already exists as a token is never merged, which keeps
    token byte strings unique (the vocab file relies on that).
    """
    if vocab_size < FIRST_MERGE_ID:
        raise BPEError(f"vocab_size must be at least {FIRST_MERGE_ID} (256 bytes + {N_SPECIAL} specials)")
    counts: Counter = Counter()
    n_lines = 0
    for line in corpus:
        n_lines += 1
        counts.update(pretokenize(line))
    if not counts:
        raise BPEError("empty corpus")

    token_bytes = [b""] * N_SPECIAL + [bytes([b]) for b in range(256)]
    words = [[BYTE_OFFSET + b for b in w] for w in counts]
    freqs = list(counts.values())

    pair_counts: Counter = Counter()
    where: dict[tuple[int, int], set[int]] = defaultdict(set)
    for wi, ids in enumerate(words):
        f = freqs[wi]
        for pair in zip(ids, ids[1:]):
            pair_counts[pair] += f
            where[pair].add(wi)

    merges: list[tuple[int, int]] = []
    known = set(token_bytes)
    while len(token_bytes) < vocab_size:
        best = None
        best_key = None
        for pair, c in pair_counts.items():
            if c < 2 or token_bytes[pair[0]] + token_bytes[pair[1]] in known:
                continue
            key = (-c, token_bytes[pair[0]], token_bytes[pair[1]])
            if best_key is None or key < best_key:
                best, best_key = pair, key
        if best is None:
            break
        new_id = len(token_bytes)
        token_bytes.append(token_bytes[best[0]] + token_bytes[best[1]])
        known.add(token_bytes[-1])
        merges.append(best)
        for wi in sorted(where.pop(best, ())):
            ids = words[wi]
            f = freqs[wi]
            for pair in zip(ids, ids[1:]):
                pair_counts[pair] -= f
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
            merged = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and (ids[i], ids[i + 1]) == best:
                    merged.append(new_id)
                    i += 2
                else:
                    merged.append(ids[i])
                    i += 1
            words[wi] = merged
            for pair in zip(merged, merged[1:]):
                pair_counts[pair] += f
                where[pair].add(wi)
        pair_counts.pop(best, None)
    return Vocab(merges)
