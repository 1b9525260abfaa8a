"""Corpus ingestion, tokenization, segmentation, MLM corruption and reordering examples."""
from dataclasses import dataclass, field
import hashlib
import math
import struct

import numpy as np

PAD, MASK, CLS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<mask>", "<cls>", "<unk>")
BYTE_OFFSET = len(RESERVED)


# --- corpus & vocabulary -------------------------------------------------

def read_corpus(paths):
    """Documents from UTF-8 text files; a blank line separates documents."""
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    docs = []
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        for block in text.replace("\r\n", "\n").split("\n\n"):
            block = block.strip("\n")
            if block.strip():
                docs.append(block)
    return docs


def write_corpus(path, docs):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n\n".join(d.strip("\n") for d in docs) + "\n")


@dataclass
class Vocab:
    mode: str
    tokens: list

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def digest(self):
        h = hashlib.sha256(self.mode.encode())
        for t in self.tokens:
            h.update(b"\x00" + t.encode("utf-8", "surrogatepass"))
        return int.from_bytes(h.digest()[:8], "little")

    def tokenize(self, text):
        if self.mode == "byte":
            return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64) + BYTE_OFFSET
        return np.array([self.index.get(w, UNK) for w in text.split()], dtype=np.int64)

    def detokenize(self, ids):
        ids = [int(i) for i in ids if int(i) >= BYTE_OFFSET]
        if self.mode == "byte":
            return bytes(i - BYTE_OFFSET for i in ids).decode("utf-8", errors="replace")
        return " ".join(self.tokens[i] for i in ids)

    def to_dict(self):
        return {"mode": self.mode, "tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mode"], list(d["tokens"]))


def build_vocab(corpus, size=None, mode="word"):
    """Vocabulary with reserved ids PAD=0, MASK=1, CLS=2, UNK=3.

    Word mode keeps the ``size`` most frequent words (ties broken
    lexicographically); byte mode always has 4 + 256 entries.
    """
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if mode == "byte":
        return Vocab("byte", list(RESERVED) + [f"<0x{b:02x}>" for b in range(256)])
    if mode != "word":
        raise ValueError(f"unknown tokenizer mode {mode!r}")
    counts = {}
    for doc in corpus:
        for w in doc.split():
            counts[w] = counts.get(w, 0) + 1
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    words = sorted(counts, key=lambda w: (-counts[w], w))
    if size is not None:
        words = words[: max(0, size - len(RESERVED))]
    return Vocab("word", list(RESERVED) + words)


def tokenize(text, vocab):
    return vocab.tokenize(text)


def detokenize(ids, vocab):
    return vocab.detokenize(ids)


# --- segmentation --------------------------------------------------------

@dataclass
class DocumentStream:
    """A document sliced into T fixed-length, right-padded segments."""

    doc_id: int
    segments: np.ndarray  # [T, L] int64
    n_real: np.ndarray  # [T] real (non-pad) tokens per segment
    prepend_cls: bool = False

    @property
    def T(self):
        return self.segments.shape[0]

    @property
    def seg_len(self):
        return self.segments.shape[1]

    def is_first(self, tau):
        return tau == 0

    def is_last(self, tau):
        return tau == self.T - 1

    def real_mask(self):
        return np.arange(self.seg_len)[None, :] < self.n_real[:, None]

    def payload(self):
        """The token ids the stream was cut from (CLS and padding removed)."""
        start = 1 if self.prepend_cls else 0
        return np.concatenate([s[start:n] for s, n in zip(self.segments, self.n_real)])

    def ar_targets(self):
        """Next-token targets [T, L]; the stream's final token has none (PAD)."""
        flat = self.payload()
        tgt = np.full(self.segments.shape, PAD, dtype=np.int64)
        pos = 0
        for tau, n in enumerate(self.n_real):
            nxt = flat[pos + 1: pos + 1 + n]
            tgt[tau, : len(nxt)] = nxt
            pos += n
        return tgt


def segment_document(ids, seg_len, prepend_cls=False, doc_id=0):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("cannot segment an empty document")
    if prepend_cls and seg_len < 2:
        raise ValueError("seg_len must be >= 2 when prepending CLS")
    payload = seg_len - 1 if prepend_cls else seg_len
    T = math.ceil(ids.size / payload)
    segs = np.full((T, seg_len), PAD, dtype=np.int64)
    n_real = np.zeros(T, dtype=np.int64)
    for tau in range(T):
        chunk = ids[tau * payload: (tau + 1) * payload]
        if prepend_cls:
            segs[tau, 0] = CLS
            segs[tau, 1: 1 + len(chunk)] = chunk
            n_real[tau] = len(chunk) + 1
        else:
            segs[tau, : len(chunk)] = chunk
            n_real[tau] = len(chunk)
    return DocumentStream(doc_id, segs, n_real, prepend_cls)


# --- masked language modelling ------------------------------------------

@dataclass
class MaskedSegment:
    inputs: np.ndarray
    targets: np.ndarray  # original id at masked positions, PAD elsewhere
    mask: np.ndarray


def corrupt_mlm(seg, mask_prob, rng, bert_split=False, vocab_size=None):
    """Mask each eligible (non PAD/CLS) position independently with ``mask_prob``.

    By default every chosen position becomes MASK. ``bert_split`` uses the
    80/10/10 mask/random/keep split instead.
    """
    if not 0.0 < mask_prob < 1.0:
        raise ValueError("mask_prob must lie in (0, 1)")
    seg = np.asarray(seg, dtype=np.int64)
    eligible = (seg != PAD) & (seg != CLS)
    mask = eligible & (rng.random(seg.shape) < mask_prob)
    inputs = seg.copy()
    if bert_split:
        if vocab_size is None:
            raise ValueError("bert_split needs vocab_size")
        roll = rng.random(seg.shape)
        rand_ids = rng.integers(BYTE_OFFSET, vocab_size, size=seg.shape)
        inputs[mask & (roll < 0.8)] = MASK
        swap = mask & (roll >= 0.8) & (roll < 0.9)
        inputs[swap] = rand_ids[swap]
    else:
        inputs[mask] = MASK
    targets = np.where(mask, seg, PAD)
    return MaskedSegment(inputs, targets, mask)


# --- segment reordering ---------------------------------------------------

def k_classes(max_chunks):
    if max_chunks < 1:
        raise ValueError("max_chunks must be >= 1")
    return sum(math.factorial(i) for i in range(1, max_chunks + 1))


def lehmer_rank(perm):
    """Lexicographic rank of a permutation of range(k)."""
    perm = list(perm)
    k = len(perm)
    if sorted(perm) != list(range(k)):
        raise ValueError(f"{perm} is not a permutation of range({k})")
    rank = 0
    for i, p in enumerate(perm):
        smaller = sum(1 for q in perm[i + 1:] if q < p)
        rank += smaller * math.factorial(k - 1 - i)
    return rank


def lehmer_unrank(rank, k):
    if not 0 <= rank < math.factorial(k):
        raise ValueError(f"rank {rank} out of range for k={k}")
    items = list(range(k))
    perm = []
    for i in range(k - 1, -1, -1):
        f = math.factorial(i)
        perm.append(items.pop(rank // f))
        rank %= f
    return tuple(perm)


def encode_label(k, perm):
    """Class id = sum_{i<k} i! + rank(perm)."""
    if len(perm) != k or k < 1:
        raise ValueError("perm must have length k >= 1")
    offset = k_classes(k - 1) if k > 1 else 0
    return offset + lehmer_rank(perm)


def decode_label(label, max_chunks):
    if not 0 <= label < k_classes(max_chunks):
        raise ValueError(f"label {label} outside [0, {k_classes(max_chunks)})")
    offset = 0
    for k in range(1, max_chunks + 1):
        block = math.factorial(k)
        if label < offset + block:
            return k, lehmer_unrank(label - offset, k)
        offset += block
    raise AssertionError("unreachable")


@dataclass
class ReorderExample:
    chunks: list  # original chunks C_1..C_k
    perm: tuple  # permuted stream is [chunks[perm[0]], chunks[perm[1]], ...]
    label: int
    permuted: np.ndarray
    stream: DocumentStream = None

    @property
    def k(self):
        return len(self.chunks)

    def restore(self):
        """Undo the permutation and return the original token ids."""
        pieces = [None] * self.k
        pos = 0
        for slot, src in enumerate(self.perm):
            n = len(self.chunks[src])
            pieces[src] = self.permuted[pos: pos + n]
            pos += n
        return np.concatenate(pieces)


def make_reorder_example(ids, max_chunks, rng, seg_len=None, prepend_cls=True, doc_id=0):
    """Split into k ~ U[1, M] chunks at random cut points and shuffle them."""
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) < max_chunks:
        raise ValueError(f"document of {len(ids)} tokens is shorter than max_chunks={max_chunks}")
    k = int(rng.integers(1, max_chunks + 1))
    cuts = np.sort(rng.choice(np.arange(1, len(ids)), size=k - 1, replace=False)) if k > 1 else []
    chunks = np.split(ids, cuts)
    perm = tuple(int(i) for i in rng.permutation(k))
    permuted = np.concatenate([chunks[i] for i in perm])
    stream = segment_document(permuted, seg_len, prepend_cls, doc_id) if seg_len else None
    return ReorderExample(chunks, perm, encode_label(k, perm), permuted, stream)


# --- batching --------------------------------------------------------------

@dataclass
class StepBatch:
    tokens: np.ndarray  # [B, L]
    targets: np.ndarray  # [B, L] next-token targets (PAD = none)
    real: np.ndarray  # [B, L] bool
    reset: np.ndarray  # [B] bool: lane starts a new document
    doc_ids: np.ndarray  # [B], -1 for idle lanes
    seg_index: np.ndarray  # [B], -1 for idle lanes


def batch_streams(docs, batch_size):
    """Feed B lanes with consecutive segments; a lane switching documents is flagged for reset.

    Lanes pick up the next unassigned document in order as soon as they run
    dry. Once the documents are exhausted idle lanes carry all-pad rows.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    docs = list(docs)
    if not docs:
        return
    L = docs[0].seg_len
    targets = {id(d): d.ar_targets() for d in docs}
    lane_doc = [None] * batch_size
    lane_pos = [0] * batch_size
    nxt = 0
    while True:
        reset = np.zeros(batch_size, dtype=bool)
        for b in range(batch_size):
            if lane_doc[b] is None or lane_pos[b] >= lane_doc[b].T:
                if nxt < len(docs):
                    lane_doc[b], lane_pos[b] = docs[nxt], 0
                    nxt += 1
                    reset[b] = True
                else:
                    lane_doc[b] = None
        if all(d is None for d in lane_doc):
            return
        tokens = np.full((batch_size, L), PAD, dtype=np.int64)
        tgt = np.full((batch_size, L), PAD, dtype=np.int64)
        real = np.zeros((batch_size, L), dtype=bool)
        doc_ids = np.full(batch_size, -1, dtype=np.int64)
        seg_index = np.full(batch_size, -1, dtype=np.int64)
        for b, d in enumerate(lane_doc):
            if d is None:
                continue
            tau = lane_pos[b]
            tokens[b] = d.segments[tau]
            tgt[b] = targets[id(d)][tau]
            real[b, : d.n_real[tau]] = True
            doc_ids[b], seg_index[b] = d.doc_id, tau
            lane_pos[b] += 1
        yield StepBatch(tokens, tgt, real, reset, doc_ids, seg_index)


@dataclass
class DocBatch:
    """B documents aligned segment by segment, shorter ones padded with empty segments."""

    tokens: np.ndarray  # [T, B, L]
    targets: np.ndarray  # [T, B, L]
    real: np.ndarray  # [T, B, L]
    n_segments: np.ndarray  # [B]
    reorder_labels: np.ndarray = None  # [B]
    doc_ids: np.ndarray = field(default=None)

    @property
    def T(self):
        return self.tokens.shape[0]

    def final_lanes(self, tau):
        return self.n_segments - 1 == tau


def stack_documents(streams, targets=None, reorder_labels=None):
    """Stack streams into a :class:`DocBatch`; ``targets`` defaults to next-token targets."""
    B = len(streams)
    if B == 0:
        raise ValueError("no documents to stack")
    L = streams[0].seg_len
    T = max(s.T for s in streams)
    tokens = np.full((T, B, L), PAD, dtype=np.int64)
    tgt = np.full((T, B, L), PAD, dtype=np.int64)
    real = np.zeros((T, B, L), dtype=bool)
    for b, s in enumerate(streams):
        tokens[: s.T, b] = s.segments
        tgt[: s.T, b] = s.ar_targets() if targets is None else np.asarray(targets[b])[: s.T]
        real[: s.T, b] = s.real_mask()
    labels = None if reorder_labels is None else np.asarray(reorder_labels, dtype=np.int64)
    return DocBatch(tokens, tgt, real, np.array([s.T for s in streams]), labels,
                    np.array([s.doc_id for s in streams]))


# --- prepared shards -------------------------------------------------------

SHARD_MAGIC = b"RBSH"
SHARD_VERSION = 1
_HEADER = struct.Struct("<4sHQII")


@dataclass
class ShardRecord:
    doc_id: int
    ids: np.ndarray
    mask: np.ndarray
    reorder_label: int = -1


def write_shard(path, records, vocab_hash, seg_len, max_chunks):
    """Header {magic, version, vocab hash, L, M}, then length-prefixed little-endian records."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, vocab_hash & (2 ** 64 - 1), seg_len, max_chunks))
        for r in records:
            ids = np.asarray(r.ids, dtype="<u4")
            bits = np.packbits(np.asarray(r.mask, dtype=bool), bitorder="little")
            body = (struct.pack("<II", r.doc_id, ids.size) + ids.tobytes() + bits.tobytes()
                    + struct.pack("<i", r.reorder_label))
            fh.write(struct.pack("<I", len(body)) + body)


def read_shard(path):
    """Return (header dict, list of ShardRecord)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated shard header")
    magic, version, vhash, seg_len, max_chunks = _HEADER.unpack_from(raw, 0)
    if magic != SHARD_MAGIC:
        raise ValueError(f"bad shard magic {magic!r}")
    if version != SHARD_VERSION:
        raise ValueError(f"unsupported shard version {version}")
    header = {"version": version, "vocab_hash": vhash, "seg_len": seg_len, "max_chunks": max_chunks}
    records, pos = [], _HEADER.size
    while pos < len(raw):
        (size,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        doc_id, n = struct.unpack_from("<II", raw, pos)
        off = pos + 8
        ids = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
        off += 4 * n
        nbytes = (n + 7) // 8
        mask = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, count=nbytes, offset=off),
                             count=n, bitorder="little").astype(bool)
        off += nbytes
        (label,) = struct.unpack_from("<i", raw, off)
        if off + 4 - pos != size:
            raise ValueError("corrupt shard record")
        records.append(ShardRecord(doc_id, ids, mask, label))
        pos += size
    return header, records
