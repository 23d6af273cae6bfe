"""Layer-wise probing: datasets, static analysis, linear probes, sweeps.

Three probe tasks over code snippets:
  LEN  surface: token-length bin in {0..4}, half-open 50-token bins
  CPX  structural: decision-point count (conditionals, loops, short-circuit
       operators) clamped to 9; straight-line code is class 0
  TYP  semantic: 0 for valid type usage, 1 when one type occurrence was
       tampered into a non-type identifier

The mini-language analyzer is a recursive-descent parser shared by all
language specs; a token-scan fallback handles foreign code.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .corpus import DEFAULT_LANGS, LEN_BIN_EDGES, CorpusError, MiniLangSpec, generate_program

_TAG_RE = re.compile(r"^<\w+>$")
_WORD_RE = re.compile(r"^\w+$")
_INT_RE = re.compile(r"^\d+$")

PROBE_TASKS = ("LEN", "CPX", "TYP")
N_CLASSES = {"LEN": 5, "CPX": 10, "TYP": 2}


class ProbingError(ValueError):
    pass


class MiniLangParseError(ValueError):
    pass


# ---------------------------------------------------------------------------
# mini-language analysis


@dataclass
class CodeAnalysis:
    decision_points: int
    type_positions: list[int]
    invalid_type_positions: list[int]
    n_functions: int

    @property
    def types_valid(self) -> bool:
        return not self.invalid_type_positions


class _Parser:
    def __init__(self, tokens: list[str], spec: MiniLangSpec):
        self.toks = tokens
        self.i = 0
        self.spec = spec
        self.kw = spec.keywords
        self.ops = spec.operators
        self.keyword_set = spec.keyword_tokens()
        self.decisions = 0
        self.type_positions: list[int] = []
        self.n_functions = 0

    def _error(self, want: str):
        got = self.toks[self.i] if self.i < len(self.toks) else "<eof>"
        raise MiniLangParseError(f"at token {self.i}: expected {want}, got {got!r}")

    def peek(self) -> str | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def advance(self) -> str:
        if self.i >= len(self.toks):
            self._error("more input")
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, literal: str):
        if self.peek() != literal:
            self._error(repr(literal))
        return self.advance()

    def name(self) -> str:
        tok = self.advance()
        if not _WORD_RE.match(tok) or tok in self.keyword_set:
            self._error("identifier")
        return tok

    def type_annotation(self):
        # any word is structurally accepted; validity is judged afterwards
        pos = self.i
        tok = self.advance()
        if not _WORD_RE.match(tok) or tok in self.keyword_set:
            self._error("type name")
        self.type_positions.append(pos)

    def operand(self):
        tok = self.advance()
        if not _WORD_RE.match(tok):
            self._error("operand")

    def expr(self):
        self.operand()
        if self.peek() in ("+", "-", "*"):
            self.advance()
            self.operand()

    def comparison(self):
        self.expr()
        if self.peek() not in ("<", ">"):
            self._error("comparison operator")
        self.advance()
        self.expr()

    def condition(self):
        self.comparison()
        while self.peek() in (self.ops["and"], self.ops["or"]):
            self.advance()
            self.decisions += 1
            self.comparison()

    def block(self):
        self.expect("{")
        while self.peek() != "}":
            self.statement()
        self.expect("}")

    def statement(self):
        tok = self.peek()
        if tok is None:
            self._error("statement")
        if tok == self.kw["func"]:
            self.function()
        elif tok == self.kw["var"]:
            self.advance()
            self.name()
            self.expect(":")
            self.type_annotation()
            self.expect("=")
            self.expr()
            self.expect(";")
        elif tok == self.kw["if"]:
            self.advance()
            self.decisions += 1
            self.expect("(")
            self.condition()
            self.expect(")")
            self.block()
            if self.peek() == self.kw["else"]:
                self.advance()
                self.block()
        elif tok == self.kw["loop"]:
            self.advance()
            self.decisions += 1
            self.expect("(")
            self.condition()
            self.expect(")")
            self.block()
        elif tok == self.kw["return"]:
            self.advance()
            self.expr()
            self.expect(";")
        else:
            self.name()
            self.expect("=")
            self.expr()
            self.expect(";")

    def function(self):
        self.expect(self.kw["func"])
        self.n_functions += 1
        self.name()
        self.expect("(")
        if self.peek() != ")":
            while True:
                self.name()
                self.expect(":")
                self.type_annotation()
                if self.peek() != ",":
                    break
                self.advance()
        self.expect(")")
        self.expect(":")
        self.type_annotation()
        self.block()

    def parse(self) -> CodeAnalysis:
        while self.i < len(self.toks):
            self.function()
        invalid = [p for p in self.type_positions if self.toks[p] not in self.spec.types]
        return CodeAnalysis(
            decision_points=self.decisions,
            type_positions=self.type_positions,
            invalid_type_positions=invalid,
            n_functions=self.n_functions,
        )


def parse_program(code_tokens: list[str], spec: MiniLangSpec) -> CodeAnalysis:
    return _Parser(list(code_tokens), spec).parse()


def token_scan_decision_count(code_tokens, spec: MiniLangSpec) -> int:
    """Keyword-occurrence fallback; exact on generator output because
    identifiers never collide with keyword spellings."""
    triggers = {spec.keywords["if"], spec.keywords["loop"],
                spec.operators["and"], spec.operators["or"]}
    case_kw = spec.keywords.get("case_arm")
    if case_kw:
        triggers.add(case_kw)
    return sum(1 for tok in code_tokens if tok in triggers)


# ---------------------------------------------------------------------------
# labelers


def label_len(code_tokens) -> int:
    """Token-length bin; language-tag tokens are excluded from the count."""
    n = sum(1 for tok in code_tokens if not _TAG_RE.match(tok))
    for cls in range(len(LEN_BIN_EDGES) - 1, -1, -1):
        if n >= LEN_BIN_EDGES[cls]:
            return cls
    return 0


def label_cpx(code_tokens, spec: MiniLangSpec, fallback: bool = True) -> int:
    try:
        count = parse_program(code_tokens, spec).decision_points
    except MiniLangParseError:
        if not fallback:
            raise
        count = token_scan_decision_count(code_tokens, spec)
    return min(count, 9)


def mutate_types(code_tokens, spec: MiniLangSpec, seed: int) -> tuple[list[str], int]:
    """Replace one type occurrence by an identifier that is not a valid type.

    Returns (mutated tokens, label=1). Deterministic under seed.
    """
    tokens = list(code_tokens)
    positions = [i for i, tok in enumerate(tokens) if tok in spec.types]
    if not positions:
        raise ProbingError("code contains no type tokens to mutate")
    pool = sorted(
        {t for lang in DEFAULT_LANGS for t in lang.types if t not in spec.types}
        | {"blob", "omega", "unit"}
    )
    rng = np.random.default_rng(seed)
    pos = positions[int(rng.integers(0, len(positions)))]
    tokens[pos] = pool[int(rng.integers(0, len(pool)))]
    return tokens, 1


# ---------------------------------------------------------------------------
# probe datasets


@dataclass(frozen=True)
class ProbeExample:
    code: str
    task: str
    label: int
    language: str

    @property
    def code_tokens(self) -> list[str]:
        return self.code.split()


@dataclass
class ProbeDataset:
    task: str
    examples: list[ProbeExample]
    train_indices: list[int]
    test_indices: list[int]

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for ex in self.examples:
            counts[ex.label] = counts.get(ex.label, 0) + 1
        return counts

    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.int64)


def _class_sizes(n_samples: int, n_classes: int) -> list[int]:
    base, rem = divmod(n_samples, n_classes)
    return [base + (1 if c < rem else 0) for c in range(n_classes)]


def _gen_len_example(spec, rng, target_bin: int):
    cpx_cap = (0, 2, 5, 5, 5)[target_bin]
    target_cpx = int(rng.integers(0, cpx_cap + 1))
    return generate_program(spec, rng, target_cpx=target_cpx, target_len_bin=target_bin)


def build_probe_dataset(task: str, specs, n_samples: int, seed: int,
                        test_fraction: float = 0.25) -> ProbeDataset:
    """Class-balanced (within one example) probe dataset, deterministic."""
    if task not in PROBE_TASKS:
        raise ProbingError(f"unknown probe task {task!r}; expected one of {PROBE_TASKS}")
    specs = list(specs)
    n_classes = N_CLASSES[task]
    sizes = _class_sizes(n_samples, n_classes)
    examples: list[ProbeExample] = []
    for cls, size in enumerate(sizes):
        for k in range(size):
            spec = specs[(cls + k) % len(specs)]
            rng = np.random.default_rng([seed, ord(task[0]), cls, k])
            if task == "LEN":
                for _attempt in range(20):
                    try:
                        code, _ = _gen_len_example(spec, rng, cls)
                        break
                    except CorpusError:
                        continue
                else:
                    raise ProbingError(f"could not fit a program into length bin {cls}")
                got = label_len(code)
            elif task == "CPX":
                code, _ = generate_program(spec, rng, target_cpx=cls)
                got = label_cpx(code, spec)
            else:  # TYP
                code, _ = generate_program(spec, rng)
                if cls == 1:
                    code, _ = mutate_types(code, spec, seed=int(rng.integers(0, 2**31)))
                analysis = parse_program(code, spec)
                got = 0 if analysis.types_valid else 1
            if got != cls:
                raise ProbingError(f"{task} generation produced label {got}, wanted {cls}")
            examples.append(ProbeExample(code=" ".join(code), task=task, label=cls,
                                         language=spec.name))

    order = np.random.default_rng([seed, 97]).permutation(len(examples))
    train_idx: list[int] = []
    test_idx: list[int] = []
    per_class_seen: dict[int, int] = {}
    per_class_test = {cls: max(1, int(round(sizes[cls] * test_fraction))) for cls in range(n_classes)}
    for i in order:
        cls = examples[int(i)].label
        seen = per_class_seen.get(cls, 0)
        (test_idx if seen < per_class_test[cls] else train_idx).append(int(i))
        per_class_seen[cls] = seen + 1
    return ProbeDataset(task=task, examples=examples, train_indices=sorted(train_idx),
                        test_indices=sorted(test_idx))


# ---------------------------------------------------------------------------
# embedding extraction


def extract_embeddings(model, examples, layer: int, vocab, pooling: str = "mean",
                       batch_size: int = 16) -> np.ndarray:
    """Pooled per-example vectors from one encoder layer (0 = embeddings)."""
    n_layers = model.config.n_layers_encoder
    if not 0 <= layer <= n_layers:
        raise ProbingError(f"layer {layer} out of range [0, {n_layers}]")
    if pooling not in ("mean", "first"):
        raise ProbingError(f"unknown pooling {pooling!r}")
    from .corpus import BOS, EOS, PAD  # local import to avoid cycle at module load

    seqs = []
    for ex in examples:
        tokens = ex.code_tokens if hasattr(ex, "code_tokens") else list(ex)
        ids = [BOS] + vocab.encode(tokens) + [EOS]
        seqs.append(ids[: model.config.max_seq_len])
    rows = []
    model.eval()
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start:start + batch_size]
        width = max(len(s) for s in chunk)
        ids = np.full((len(chunk), width), PAD, dtype=np.int64)
        mask = np.zeros((len(chunk), width))
        for r, s in enumerate(chunk):
            ids[r, : len(s)] = s
            mask[r, : len(s)] = 1.0
        _, trace = model.encode_batch(ids, mask, capture=True)
        states = trace[layer]
        if pooling == "first":
            rows.append(states[:, 0, :])
        else:
            denom = mask.sum(axis=1, keepdims=True)
            rows.append((states * mask[:, :, None]).sum(axis=1) / denom)
    return np.concatenate(rows, axis=0)


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class LinearProbe:
    """Affine softmax classifier; no hidden units by construction."""

    weight: np.ndarray          # [d, n_classes]
    bias: np.ndarray            # [n_classes]
    feature_mean: np.ndarray
    feature_scale: np.ndarray

    def logits(self, embeddings: np.ndarray) -> np.ndarray:
        z = (embeddings - self.feature_mean) / self.feature_scale
        return z @ self.weight + self.bias

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        return self.logits(embeddings).argmax(axis=1)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def train_probe(embeddings: np.ndarray, labels: np.ndarray, split, seed: int = 0,
                learning_rate: float = 0.5, max_epochs: int = 2000,
                tol: float = 1e-6) -> tuple[LinearProbe, float]:
    """Full-batch gradient descent on softmax regression; returns test accuracy."""
    train_idx, test_idx = (np.asarray(split[0], dtype=np.int64),
                           np.asarray(split[1], dtype=np.int64))
    labels = np.asarray(labels, dtype=np.int64)
    x_train, y_train = embeddings[train_idx], labels[train_idx]
    classes = np.unique(y_train)
    if classes.size < 2:
        raise ProbingError("train split contains fewer than 2 classes")
    n_classes = int(labels.max()) + 1
    mean = x_train.mean(axis=0)
    scale = np.maximum(x_train.std(axis=0), 1e-8)
    z = (x_train - mean) / scale
    n, d = z.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y_train] = 1.0

    prev_loss = np.inf
    for _ in range(max_epochs):
        p = _softmax_rows(z @ w + b)
        loss = -np.log(np.maximum(p[np.arange(n), y_train], 1e-300)).mean()
        if abs(prev_loss - loss) < tol:
            break
        prev_loss = loss
        g = (p - onehot) / n
        w -= learning_rate * (z.T @ g)
        b -= learning_rate * g.sum(axis=0)

    probe = LinearProbe(weight=w, bias=b, feature_mean=mean, feature_scale=scale)
    y_test = labels[test_idx]
    accuracy = float((probe.predict(embeddings[test_idx]) == y_test).mean())
    return probe, accuracy


def layer_sweep(model, dataset: ProbeDataset, vocab, pooling: str = "mean",
                seed: int = 0) -> list[tuple[int, float]]:
    """Probe accuracy per encoder layer, embedding output first."""
    labels = dataset.labels()
    split = (dataset.train_indices, dataset.test_indices)
    out = []
    for layer in range(model.config.n_layers_encoder + 1):
        emb = extract_embeddings(model, dataset.examples, layer, vocab, pooling=pooling)
        _, acc = train_probe(emb, labels, split, seed=seed)
        out.append((layer, acc))
    return out


def sweep_to_csv(rows: list[tuple[int, float]]) -> str:
    lines = ["layer,accuracy"]
    lines += [f"{layer},{acc:.6f}" for layer, acc in rows]
    return "\n".join(lines) + "\n"
