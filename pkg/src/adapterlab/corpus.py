"""Data layer: JSONL ingestion, synthetic mini-language corpora, vocab, splits.

Six CodeSearchNet-style languages are mirrored by small synthetic
mini-languages sharing one grammar but with pairwise-disjoint keyword and
type spellings. Generated programs are grammatical (typed variables,
conditionals, loops, nested functions) and each description is a template
rendering of the program's true structure, so summarization is learnable
at desk scale.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


class CorpusError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Whitespace plus punctuation tokenization; every token is a word or a
    single non-word character."""
    return _TOKEN_RE.findall(text)


def detokenize(tokens) -> str:
    return " ".join(tokens)


@dataclass(frozen=True)
class CorpusExample:
    language: str
    code: str
    description: str
    id: int
    truncated: bool = False

    @property
    def code_tokens(self) -> list[str]:
        return self.code.split()

    @property
    def description_tokens(self) -> list[str]:
        return self.description.split()


# ---------------------------------------------------------------------------
# mini-languages


@dataclass(frozen=True)
class MiniLangSpec:
    name: str
    keywords: dict[str, str]          # roles: func, var, if, else, loop, return
    operators: dict[str, str]         # roles: and, or (short-circuit spellings)
    types: tuple[str, ...]
    description_templates: tuple[tuple[str, ...], ...]

    def keyword_tokens(self) -> set[str]:
        return set(self.keywords.values()) | set(self.operators.values())


_SHARED_TEMPLATES = (
    ("routine", "{name}", "accepts", "{params}", "arguments", "and", "returns", "{type}",
     ";", "it", "contains", "{branches}", "branches", "and", "{loops}", "loops"),
    ("the", "{type}", "procedure", "{name}", "uses", "{branches}", "branches", ",",
     "{loops}", "loops", "and", "{params}", "arguments"),
    ("{name}", "maps", "{params}", "arguments", "to", "one", "{type}", "value",
     "through", "{branches}", "branches", "and", "{loops}", "loops"),
)


def _lang(name, func, var, if_, else_, loop, ret, and_, or_, types) -> MiniLangSpec:
    return MiniLangSpec(
        name=name,
        keywords={"func": func, "var": var, "if": if_, "else": else_, "loop": loop, "return": ret},
        operators={"and": and_, "or": or_},
        types=types,
        description_templates=_SHARED_TEMPLATES,
    )


DEFAULT_LANGS: tuple[MiniLangSpec, ...] = (
    _lang("pylite", "def", "let", "if", "else", "while", "return", "and", "or",
          ("int", "float", "str", "bool")),
    _lang("jslite", "function", "const", "when", "otherwise", "foreach", "give", "also", "either",
          ("num", "text", "flag", "vec")),
    _lang("rblite", "fn", "bind", "cond", "alt", "loop", "emit", "both", "any",
          ("whole", "real", "chars", "truth")),
    _lang("golite", "proc", "decl", "check", "fallback", "repeat", "send", "conj", "disj",
          ("i32", "f64", "txt", "bit")),
    _lang("phlite", "sub", "hold", "branch", "orelse", "until", "yield", "wedge", "vee",
          ("dec", "quad", "glyph", "tog")),
    _lang("swlite", "method", "place", "test", "recover", "iterate", "produce", "unite", "fork",
          ("short", "wide", "rune", "mark")),
)

LANGS_BY_NAME = {spec.name: spec for spec in DEFAULT_LANGS}

_IDENT_POOL = ("value", "count", "total", "item", "index", "left", "right", "size",
               "depth", "limit", "acc", "buf", "src", "dst", "res", "arg")
_FUNC_POOL = ("process", "combine", "merge", "scan", "fold", "build", "pack",
              "route", "blend", "shift")
_REL_OPS = ("<", ">")
_ARITH_OPS = ("+", "-", "*")

LEN_BIN_EDGES = (0, 50, 100, 150, 200)


def default_language_set(n: int = 4) -> tuple[MiniLangSpec, ...]:
    if not 2 <= n <= len(DEFAULT_LANGS):
        raise CorpusError(f"language count must lie in [2, {len(DEFAULT_LANGS)}]")
    return DEFAULT_LANGS[:n]


@dataclass
class _ProgramState:
    spec: MiniLangSpec
    rng: np.random.Generator
    tokens: list[str] = field(default_factory=list)
    branches: int = 0
    loops: int = 0
    bool_ops: int = 0

    @property
    def decisions(self) -> int:
        return self.branches + self.loops + self.bool_ops

    def ident(self) -> str:
        return _IDENT_POOL[self.rng.integers(0, len(_IDENT_POOL))]

    def type_name(self) -> str:
        return self.spec.types[self.rng.integers(0, len(self.spec.types))]

    def operand(self) -> str:
        if self.rng.random() < 0.5:
            return self.ident()
        return str(self.rng.integers(0, 10))

    def expr(self) -> list[str]:
        out = [self.operand()]
        if self.rng.random() < 0.6:
            out += [_ARITH_OPS[self.rng.integers(0, len(_ARITH_OPS))], self.operand()]
        return out

    def comparison(self) -> list[str]:
        return [self.operand(), _REL_OPS[self.rng.integers(0, 2)], self.operand()]

    def condition(self, extra_bool_ops: int = 0) -> list[str]:
        out = self.comparison()
        for _ in range(extra_bool_ops):
            op_role = "and" if self.rng.random() < 0.5 else "or"
            out += [self.spec.operators[op_role]] + self.comparison()
            self.bool_ops += 1
        return out


def _var_stmt(st: _ProgramState) -> list[str]:
    return [st.spec.keywords["var"], st.ident(), ":", st.type_name(), "="] + st.expr() + [";"]


def _assign_stmt(st: _ProgramState) -> list[str]:
    return [st.ident(), "="] + st.expr() + [";"]


def _return_stmt(st: _ProgramState) -> list[str]:
    return [st.spec.keywords["return"]] + st.expr() + [";"]


def _simple_block(st: _ProgramState) -> list[str]:
    body = _assign_stmt(st) if st.rng.random() < 0.7 else _var_stmt(st)
    return ["{"] + body + ["}"]


def _if_stmt(st: _ProgramState, extra_bool_ops: int = 0) -> list[str]:
    st.branches += 1
    kw = st.spec.keywords
    out = [kw["if"], "("] + st.condition(extra_bool_ops) + [")"] + _simple_block(st)
    if st.rng.random() < 0.4:
        out += [kw["else"]] + _simple_block(st)
    return out


def _loop_stmt(st: _ProgramState, extra_bool_ops: int = 0) -> list[str]:
    st.loops += 1
    kw = st.spec.keywords
    return [kw["loop"], "("] + st.condition(extra_bool_ops) + [")"] + _simple_block(st)


def _function_tokens(st: _ProgramState, name: str, n_params: int, decision_budget: int,
                     nested: bool) -> list[str]:
    kw = st.spec.keywords
    tokens = [kw["func"], name, "("]
    for p in range(n_params):
        if p:
            tokens.append(",")
        tokens += [st.ident(), ":", st.type_name()]
    tokens += [")", ":", st.type_name(), "{"]
    tokens += _var_stmt(st)

    remaining = decision_budget
    while remaining > 0:
        # spend 1 decision, or 2 when a short-circuit operator joins the condition
        spend_two = remaining >= 2 and st.rng.random() < 0.35
        extra = 1 if spend_two else 0
        if st.rng.random() < 0.5:
            tokens += _if_stmt(st, extra_bool_ops=extra)
        else:
            tokens += _loop_stmt(st, extra_bool_ops=extra)
        remaining -= 1 + extra
        if remaining > 0 and st.rng.random() < 0.3:
            tokens += _assign_stmt(st)

    if nested:
        inner_name = _FUNC_POOL[st.rng.integers(0, len(_FUNC_POOL))]
        tokens += _function_tokens(st, inner_name, 0, 0, nested=False)

    tokens += _return_stmt(st)
    tokens.append("}")
    return tokens


def generate_program(spec: MiniLangSpec, rng: np.random.Generator,
                     target_cpx: int | None = None,
                     target_len_bin: int | None = None) -> tuple[list[str], list[str]]:
    """One grammatical program plus its structure-derived description."""
    st = _ProgramState(spec=spec, rng=rng)
    if target_cpx is None:
        target_cpx = int(rng.choice([0, 1, 1, 2, 2, 3, 3, 4, 5]))
    name = _FUNC_POOL[rng.integers(0, len(_FUNC_POOL))]
    n_params = int(rng.integers(0, 4))
    nested = target_len_bin != 0 and rng.random() < 0.2
    tokens = _function_tokens(st, name, n_params, target_cpx, nested)

    if target_len_bin is not None:
        lo = LEN_BIN_EDGES[target_len_bin]
        hi = lo + 46 if target_len_bin == len(LEN_BIN_EDGES) - 1 else LEN_BIN_EDGES[target_len_bin + 1]
        if len(tokens) >= hi:
            raise CorpusError(
                f"generated program too long ({len(tokens)} tokens) for bin {target_len_bin}")
        closing = tokens.pop()
        while len(tokens) + 1 < lo:
            tokens += _assign_stmt(st)
        tokens.append(closing)

    return_type = tokens[tokens.index(")") + 2] if ")" in tokens else spec.types[0]
    template = spec.description_templates[(st.branches + st.loops) % len(spec.description_templates)]
    slots = {"{name}": name, "{params}": str(n_params), "{type}": return_type,
             "{branches}": str(st.branches), "{loops}": str(st.loops)}
    description = [slots.get(tok, tok) for tok in template]
    return tokens, description


def _language_sizes(n_per_language: int, n_langs: int, imbalance: int) -> list[int]:
    if imbalance < 1:
        raise CorpusError("imbalance must be >= 1")
    if imbalance == 1:
        return [n_per_language] * n_langs
    if n_per_language % imbalance != 0:
        raise CorpusError(f"n_per_language {n_per_language} must be divisible by imbalance {imbalance}")
    lo, hi = n_per_language // imbalance, n_per_language
    # geometric interpolation, largest language first, exact ratio at the ends
    sizes = np.geomspace(hi, lo, num=n_langs).round().astype(int).tolist()
    sizes[0], sizes[-1] = hi, lo
    return sizes


def generate_synthetic(specs, n_per_language: int, seed: int,
                       imbalance: int = 1) -> list[CorpusExample]:
    """Deterministic synthetic corpus; per-language streams derive from seed."""
    specs = list(specs)
    if n_per_language < 1:
        raise CorpusError("n_per_language must be >= 1")
    sizes = _language_sizes(n_per_language, len(specs), imbalance)
    examples: list[CorpusExample] = []
    next_id = 0
    for lang_idx, (spec, size) in enumerate(zip(specs, sizes)):
        for k in range(size):
            rng = np.random.default_rng([seed, lang_idx, k])
            code, desc = generate_program(spec, rng)
            examples.append(CorpusExample(language=spec.name, code=detokenize(code),
                                          description=detokenize(desc), id=next_id))
            next_id += 1
    return examples


# ---------------------------------------------------------------------------
# JSONL in / out


def ingest_jsonl(path, languages=None, max_tokens: int | None = None) -> list[CorpusExample]:
    """Read CodeSearchNet-format JSONL (language, code, docstring[, id])."""
    accepted = None if languages is None else {
        s.name if isinstance(s, MiniLangSpec) else s for s in languages
    }
    examples: list[CorpusExample] = []
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc})") from exc
            for fieldname in ("language", "code", "docstring"):
                if fieldname not in obj:
                    raise CorpusError(f"{path}:{lineno}: missing field {fieldname!r}")
            lang = obj["language"]
            if accepted is not None and lang not in accepted:
                raise CorpusError(
                    f"{path}:{lineno}: unknown language {lang!r}; accepted: {sorted(accepted)}")
            code_tokens = tokenize(str(obj["code"]))
            desc_tokens = tokenize(str(obj["docstring"]))
            if not code_tokens or not desc_tokens:
                raise CorpusError(f"{path}:{lineno}: empty code or docstring after tokenization")
            truncated = False
            if max_tokens is not None:
                if len(code_tokens) > max_tokens:
                    code_tokens, truncated = code_tokens[:max_tokens], True
                if len(desc_tokens) > max_tokens:
                    desc_tokens, truncated = desc_tokens[:max_tokens], True
            examples.append(CorpusExample(
                language=lang,
                code=detokenize(code_tokens),
                description=detokenize(desc_tokens),
                id=int(obj.get("id", len(examples))),
                truncated=truncated,
            ))
    return examples


def write_jsonl(examples, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"id": ex.id, "language": ex.language, "code": ex.code,
                                 "docstring": ex.description}, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitCorpus:
    by_language: dict[str, dict[str, list[CorpusExample]]]

    def pooled(self, split: str) -> list[CorpusExample]:
        out = []
        for lang in sorted(self.by_language):
            out.extend(self.by_language[lang][split])
        return out

    @property
    def languages(self) -> list[str]:
        return sorted(self.by_language)


def split(examples, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitCorpus:
    """Stratified, disjoint, deterministic train/dev/test split per language."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise CorpusError(f"fractions must sum to 1, got {fractions}")
    by_lang: dict[str, list[CorpusExample]] = {}
    for ex in examples:
        by_lang.setdefault(ex.language, []).append(ex)
    out: dict[str, dict[str, list[CorpusExample]]] = {}
    for lang_idx, lang in enumerate(sorted(by_lang)):
        pool = sorted(by_lang[lang], key=lambda e: e.id)
        if len(pool) < 3:
            raise CorpusError(f"language {lang!r} has {len(pool)} examples; need >= 3 to split")
        rng = np.random.default_rng([seed, lang_idx])
        order = rng.permutation(len(pool))
        n = len(pool)
        n_dev = int(np.floor(fractions[1] * n))
        n_test = int(np.floor(fractions[2] * n))
        n_train = n - n_dev - n_test
        shuffled = [pool[i] for i in order]
        out[lang] = {
            "train": shuffled[:n_train],
            "dev": shuffled[n_train:n_train + n_dev],
            "test": shuffled[n_train + n_dev:],
        }
    return SplitCorpus(by_language=out)


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    def __init__(self, tokens: list[str], language_tags: dict[str, int]):
        self.id_to_token = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            raise CorpusError("duplicate tokens in vocabulary")
        self.language_tags = language_tags

    def __len__(self):
        return len(self.id_to_token)

    @property
    def has_language_tags(self) -> bool:
        return bool(self.language_tags)

    @classmethod
    def build(cls, examples, include_language_tags: bool = True) -> "Vocabulary":
        langs = sorted({ex.language for ex in examples})
        counts: dict[str, int] = {}
        for ex in examples:
            for tok in ex.code_tokens + ex.description_tokens:
                counts[tok] = counts.get(tok, 0) + 1
        tokens = list(SPECIAL_TOKENS)
        tags = {}
        if include_language_tags:
            for lang in langs:
                tags[lang] = len(tokens)
                tokens.append(f"<{lang}>")
        for tok in sorted(counts, key=lambda t: (-counts[t], t)):
            tokens.append(tok)
        return cls(tokens, tags)

    def tag_id(self, language: str) -> int:
        if language not in self.language_tags:
            raise CorpusError(f"no language tag for {language!r}")
        return self.language_tags[language]

    def encode(self, tokens) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids, strip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            tok = self.id_to_token[int(i)]
            if strip_special and int(i) in (PAD, BOS, EOS):
                continue
            out.append(tok)
        return out

    def to_dict(self) -> dict:
        return {"tokens": self.id_to_token, "language_tags": self.language_tags}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(list(d["tokens"]), {k: int(v) for k, v in d["language_tags"].items()})

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
