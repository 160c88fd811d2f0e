"""Surgical-label text pipeline.

Label registries (tools, verbs, targets, phases, allowed triplets) are loaded
from the packaged ``data/registry.tsv`` file.  Prompts are built from frame
labels with one of three templates, parsed back with greedy longest-match
against the registries, and tokenized against a deterministic vocabulary.

Prompt surface forms replace underscores with spaces ("cystic_plate" appears
as "cystic plate"), everything lowercase, single spaces.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from importlib import resources

import torch
from torch import nn


class ParseError(ValueError):
    """Prompt text that cannot be resolved against the registries."""

    def __init__(self, message: str, span: str = ""):
        super().__init__(message)
        self.span = span


class LabelError(ValueError):
    """Label inconsistent with the registries or its own invariants."""


def _load_registry() -> dict[str, list[str]]:
    entries: dict[str, list[str]] = {"tool": [], "verb": [], "target": [], "phase": [], "triplet": []}
    text = resources.files("lapgen.data").joinpath("registry.tsv").read_text("utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        kind, _, name = line.partition("\t")
        if kind not in entries or not name:
            raise LabelError(f"registry.tsv line {lineno}: bad entry {line!r}")
        entries[kind].append(name)
    return entries


_REG = _load_registry()

TOOLS: tuple[str, ...] = tuple(_REG["tool"])
VERBS: tuple[str, ...] = tuple(_REG["verb"])
TARGETS: tuple[str, ...] = tuple(_REG["target"])
PHASES: tuple[str, ...] = tuple(_REG["phase"])
ALLOWED_TRIPLETS: frozenset[tuple[str, str, str]] = frozenset(
    tuple(t.split("|")) for t in _REG["triplet"]
)
TRIPLET_CLASSES: tuple[tuple[str, str, str], ...] = tuple(
    tuple(t.split("|")) for t in _REG["triplet"]
)

# Spelling variants seen in external label sources, mapped onto registry names.
PHASE_ALIASES: dict[str, str] = {
    "calot-triangle-dissection": "carlot-triangle-dissection",
    "calottriangledissection": "carlot-triangle-dissection",
    "clipping-cutting": "clipping-and-cutting",
    "clippingcutting": "clipping-and-cutting",
    "cleaning-coagulation": "cleaning-and-coagulation",
    "cleaningcoagulation": "cleaning-and-coagulation",
    "gallbladder-retraction": "gallbladder-extraction",
    "gallbladderretraction": "gallbladder-extraction",
    "gallbladderdissection": "gallbladder-dissection",
    "gallbladderpackaging": "gallbladder-packaging",
}


def normalize_phase(phase: str) -> str | None:
    """Map a phase spelling variant onto its registry name, or None if unknown."""
    slug = re.sub(r"\s+", "-", phase.strip().lower())
    if slug in PHASES:
        return slug
    return PHASE_ALIASES.get(slug)


class PromptVariant(enum.Enum):
    TRIPLET_PHASE = "triplet_phase"
    TOOLS_PHASE = "tools_phase"
    PHASE_ONLY = "phase_only"


@dataclass(frozen=True)
class ActionTriplet:
    tool: str
    verb: str
    target: str

    def __post_init__(self):
        if self.tool not in TOOLS:
            raise LabelError(f"unknown tool {self.tool!r}")
        if self.verb not in VERBS:
            raise LabelError(f"unknown verb {self.verb!r}")
        if self.target not in TARGETS:
            raise LabelError(f"unknown target {self.target!r}")

    def is_allowed(self) -> bool:
        return (self.tool, self.verb, self.target) in ALLOWED_TRIPLETS

    def as_tuple(self) -> tuple[str, str, str]:
        return (self.tool, self.verb, self.target)


@dataclass(frozen=True)
class FrameLabel:
    """Per-frame annotation: action triplets, surgical phase, tools present."""

    triplets: tuple[ActionTriplet, ...]
    phase: str
    tools_present: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "triplets", tuple(self.triplets))
        object.__setattr__(self, "tools_present", frozenset(self.tools_present))
        for trip in self.triplets:
            if trip.tool not in self.tools_present:
                raise LabelError(
                    f"triplet tool {trip.tool!r} missing from tools_present"
                )

    def validate_combinations(self) -> None:
        for trip in self.triplets:
            if not trip.is_allowed():
                raise LabelError(f"triplet {trip.as_tuple()} not in the allowed set")


def _surface(name: str) -> str:
    return name.replace("_", " ")


def _clean(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


def build_prompt(label: FrameLabel, variant: PromptVariant) -> str:
    """Render a label as a conditioning prompt.

    TRIPLET_PHASE: "<tool> <verb> <target>" per triplet joined by " and ",
    suffixed " in <phase>".  TOOLS_PHASE drops verbs/targets; PHASE_ONLY is
    just the phase.  The phase is emitted as carried by the label.
    """
    if variant is PromptVariant.TRIPLET_PHASE:
        if not label.triplets:
            raise LabelError("TRIPLET_PHASE prompt requires at least one triplet")
        actions = " and ".join(
            f"{t.tool} {t.verb} {_surface(t.target)}" for t in label.triplets
        )
        return _clean(f"{actions} in {label.phase}")
    if variant is PromptVariant.TOOLS_PHASE:
        if not label.tools_present:
            raise LabelError("TOOLS_PHASE prompt requires at least one tool")
        ordered = sorted(label.tools_present, key=TOOLS.index)
        return _clean(f"{' and '.join(ordered)} in {label.phase}")
    if variant is PromptVariant.PHASE_ONLY:
        if not label.phase:
            raise LabelError("PHASE_ONLY prompt requires a phase")
        return _clean(label.phase)
    raise LabelError(f"unknown prompt variant {variant!r}")


_TARGET_BY_SURFACE = {_surface(t): t for t in TARGETS}


def _parse_segment(segment: str) -> ActionTriplet | str:
    """Resolve one " and "-separated segment to a triplet or a bare tool."""
    words = segment.split(" ")
    if len(words) == 1:
        if words[0] in TOOLS:
            return words[0]
        raise ParseError(f"unknown tool {segment!r}", span=segment)
    if len(words) < 3:
        raise ParseError(f"segment {segment!r} is neither a tool nor a triplet", span=segment)
    tool, verb = words[0], words[1]
    if tool not in TOOLS:
        raise ParseError(f"unknown tool {tool!r} in {segment!r}", span=tool)
    if verb not in VERBS:
        raise ParseError(f"unknown verb {verb!r} in {segment!r}", span=verb)
    # Greedy longest match: all remaining words must form one registry target.
    surface = " ".join(words[2:])
    target = _TARGET_BY_SURFACE.get(surface)
    if target is None:
        raise ParseError(f"unknown target {surface!r} in {segment!r}", span=surface)
    return ActionTriplet(tool, verb, target)


def parse_prompt(prompt: str) -> FrameLabel:
    """Invert build_prompt for prompts over known registries.

    Returns a label whose fields cover exactly what the prompt encodes:
    triplets + phase, tools + phase, or phase alone.  Phases are returned in
    registry spelling (variants resolved through the normalization map).
    """
    text = _clean(prompt)
    if not text:
        raise ParseError("empty prompt", span=prompt)
    head, sep, tail = text.rpartition(" in ")
    if sep:
        phase = normalize_phase(tail)
        if phase is None:
            raise ParseError(f"unknown phase {tail!r}", span=tail)
        body = head
    else:
        phase = normalize_phase(text)
        if phase is None:
            raise ParseError(f"unknown phase {text!r}", span=text)
        return FrameLabel(triplets=(), phase=phase)

    parsed = [_parse_segment(seg) for seg in body.split(" and ")]
    if all(isinstance(p, str) for p in parsed):
        return FrameLabel(triplets=(), phase=phase, tools_present=frozenset(parsed))
    if all(isinstance(p, ActionTriplet) for p in parsed):
        return FrameLabel(
            triplets=tuple(parsed),
            phase=phase,
            tools_present=frozenset(p.tool for p in parsed),
        )
    raise ParseError(f"mixed tool/triplet segments in {text!r}", span=body)


# --------------------------------------------------------------------------
# Vocabulary and tokenization


@dataclass(frozen=True)
class Vocab:
    token_to_id: dict[str, int]
    id_to_token: dict[int, str]
    pad_id: int = 0
    unk_id: int = 1
    null_id: int = 2

    def __len__(self) -> int:
        return len(self.token_to_id)


PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
NULL_TOKEN = "<null>"


def build_vocab(extra_words: set[str] | None = None) -> Vocab:
    """Vocabulary over the registry word set (sorted, order-independent)."""
    words: set[str] = {"in", "and"}
    for name in TOOLS + VERBS + TARGETS + PHASES:
        words.update(_surface(name).split(" "))
        words.add(name)  # hyphenated phases tokenize as single words
    if extra_words:
        words.update(extra_words)
    tokens = [PAD_TOKEN, UNK_TOKEN, NULL_TOKEN] + sorted(words)
    token_to_id = {tok: i for i, tok in enumerate(tokens)}
    return Vocab(token_to_id=token_to_id, id_to_token={i: t for t, i in token_to_id.items()})


MAX_TOKENS = 16


def tokenize(prompt: str, vocab: Vocab, max_tokens: int = MAX_TOKENS) -> list[int]:
    """Whitespace tokenization, unknowns mapped to unk, clamped/padded to max_tokens."""
    words = _clean(prompt).split(" ") if _clean(prompt) else []
    ids = [vocab.token_to_id.get(w, vocab.unk_id) for w in words[:max_tokens]]
    ids.extend([vocab.pad_id] * (max_tokens - len(ids)))
    return ids


def null_token_ids(vocab: Vocab, max_tokens: int = MAX_TOKENS) -> list[int]:
    """The learned null-context sequence used for classifier-free guidance."""
    return [vocab.null_id] * max_tokens


# --------------------------------------------------------------------------
# Toy text encoder


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    context_dim: int = 64
    max_tokens: int = MAX_TOKENS


class TextEncoder(nn.Module):
    """Embedding + learned positions + one self-attention layer."""

    def __init__(self, config: TextEncoderConfig):
        super().__init__()
        self.config = config
        d = config.context_dim
        self.embed = nn.Embedding(config.vocab_size, d)
        self.pos = nn.Parameter(torch.zeros(config.max_tokens, d))
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.norm = nn.LayerNorm(d)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        # ids: (B, L) int64 -> (B, L, context_dim)
        if ids.max() >= self.config.vocab_size:
            raise IndexError("token id out of vocabulary range")
        h = self.embed(ids) + self.pos[: ids.shape[1]]
        q, k, v = self.q(h), self.k(h), self.v(h)
        attn = torch.softmax(q @ k.transpose(-1, -2) / (h.shape[-1] ** 0.5), dim=-1)
        return self.norm(h + self.out(attn @ v))


def init_text_encoder(config: TextEncoderConfig, seed: int) -> TextEncoder:
    gen = torch.Generator().manual_seed(seed)
    enc = TextEncoder(config)
    with torch.no_grad():
        for name, p in enc.named_parameters():
            if name == "norm.weight":
                p.fill_(1.0)
            elif name.endswith(".bias"):
                p.zero_()
            else:
                p.normal_(0.0, 0.02, generator=gen)
    return enc


def encode_text(encoder: TextEncoder, ids: torch.Tensor) -> torch.Tensor:
    """Context embedding sequences for batched token ids."""
    return encoder(ids)
