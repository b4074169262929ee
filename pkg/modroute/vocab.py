"""
Toy vocabulary and template grammar.

Target sentences are rendered from a latent vector: the first latent
coordinate picks one of the templates (through the standard normal CDF, so
templates are equally likely), and the sign pattern of the following
coordinates fills the template's slots. Each template carries an
abstractness rating in [1, 5] that the corpus uses as its covariate.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy.special import ndtr

from .exceptions import CorpusError

EOS_ID = 0
PAD_ID = 1
UNK_ID = 2
SPECIAL_TOKENS = ("<eos>", "<pad>", "<unk>")

INSTRUCTION_TEXT = "describe the stimulus:"

SLOT_BITS = 3

SLOT_WORDS: Dict[str, Tuple[str, ...]] = {
    "adj": ("red", "small", "bright", "wooden", "old", "quiet", "striped", "tall"),
    "noun": ("dog", "boat", "chair", "horse", "lamp", "train", "bird", "kite"),
    "verb": ("runs", "waits", "turns", "jumps", "rests", "sings", "falls", "swims"),
    "place": ("field", "river", "kitchen", "street", "forest", "beach", "garden", "station"),
    "concept": ("freedom", "justice", "memory", "truth", "hope", "reason", "duty", "chance"),
    "quality": ("fragile", "certain", "vague", "endless", "hidden", "shared", "simple", "strange"),
    "agent": ("a child", "the crowd", "a farmer", "the pilot", "a nurse", "the judge", "a poet", "the guard"),
}


@dataclass(frozen=True)
class Template:
    pattern: str
    abstractness: float

    @property
    def slots(self) -> List[str]:
        return [tok[1:-1] for tok in self.pattern.split() if tok.startswith("{") and tok.endswith("}")]


# First half concrete scenes, second half abstract statements.
TEMPLATES: Tuple[Template, ...] = (
    Template("a {adj} {noun} {verb} in the {place}", 1.2),
    Template("the {noun} {verb} near a {adj} {place}", 1.3),
    Template("a {adj} {noun} sits on the {place} floor", 1.4),
    Template("{agent} holds a {adj} {noun}", 1.5),
    Template("{agent} walks a {noun} along the {place}", 1.4),
    Template("two {adj} {noun} {verb} by the {place}", 1.3),
    Template("a {noun} and a {noun} stand in the {place}", 1.2),
    Template("the {adj} {noun} is next to the door", 1.6),
    Template("{agent} paints a {adj} {noun}", 1.8),
    Template("a {noun} {verb} under a {adj} sky", 1.7),
    Template("the {place} has a {adj} {noun}", 1.6),
    Template("{agent} feeds the {noun} in the {place}", 1.5),
    Template("a picture of a {adj} {noun}", 1.4),
    Template("the {noun} {verb} past the {adj} {noun}", 1.5),
    Template("a {adj} {noun} lies beside the {place} wall", 1.3),
    Template("{agent} carries a {noun} to the {place}", 1.6),
    Template("a {noun} waits at the {adj} {place}", 1.5),
    Template("the {adj} {noun} {verb} at night", 1.9),
    Template("{agent} sees a {noun} in the {place}", 1.7),
    Template("a {adj} {noun} floats on the {place}", 1.6),
    Template("the idea of {concept} feels {quality}", 4.6),
    Template("{concept} is {quality} and {quality}", 4.8),
    Template("{agent} thinks about {concept}", 3.9),
    Template("every {concept} seems {quality} to {agent}", 4.4),
    Template("the value of {concept} is {quality}", 4.5),
    Template("{concept} and {concept} remain {quality}", 4.7),
    Template("{agent} doubts the {quality} {concept}", 4.1),
    Template("a {quality} sense of {concept}", 4.5),
    Template("the meaning of {concept} stays {quality}", 4.6),
    Template("{agent} believes {concept} is {quality}", 4.2),
    Template("without {concept} life feels {quality}", 4.4),
    Template("the {quality} nature of {concept}", 4.7),
    Template("{concept} grows {quality} over time", 4.3),
    Template("{agent} argues that {concept} matters", 4.0),
    Template("some {concept} is always {quality}", 4.6),
    Template("the search for {concept} is {quality}", 4.3),
    Template("{agent} speaks of {quality} {concept}", 4.0),
    Template("{concept} depends on {concept}", 4.8),
    Template("a {quality} theory of {concept}", 4.5),
    Template("the limits of {concept} are {quality}", 4.6),
)


class TemplateGrammar:
    """Deterministic map from a latent vector to a template sentence."""

    def __init__(self, templates: Sequence[Template] = TEMPLATES):
        self.templates = tuple(templates)
        self.max_slots = max(len(t.slots) for t in self.templates)

    @property
    def required_latent_dim(self) -> int:
        return 1 + SLOT_BITS * self.max_slots

    def template_index(self, latent: np.ndarray) -> int:
        n = len(self.templates)
        return min(int(ndtr(latent[0]) * n), n - 1)

    def realize(self, latent: np.ndarray) -> Tuple[int, List[str]]:
        latent = np.asarray(latent, dtype=np.float64)
        if latent.shape[0] < self.required_latent_dim:
            raise CorpusError(
                f"latent dimension {latent.shape[0]} too small; the grammar needs {self.required_latent_dim}"
            )
        index = self.template_index(latent)
        words: List[str] = []
        slot = 0
        for tok in self.templates[index].pattern.split():
            if tok.startswith("{") and tok.endswith("}"):
                bits = latent[1 + SLOT_BITS * slot: 1 + SLOT_BITS * (slot + 1)] > 0
                choice = int(sum(int(b) << i for i, b in enumerate(bits)))
                words.extend(SLOT_WORDS[tok[1:-1]][choice].split())
                slot += 1
            else:
                words.append(tok)
        return index, words

    def abstractness(self, index: int) -> float:
        return self.templates[index].abstractness

    def words(self) -> List[str]:
        seen: Dict[str, None] = {}
        for template in self.templates:
            for tok in template.pattern.split():
                if not tok.startswith("{"):
                    seen.setdefault(tok)
        for choices in SLOT_WORDS.values():
            for phrase in choices:
                for w in phrase.split():
                    seen.setdefault(w)
        return list(seen)


class Vocabulary:
    """Word-level vocabulary of a fixed size; ids 0, 1, 2 are eos, pad, unk."""

    def __init__(self, words: Iterable[str], size: int):
        tokens = list(SPECIAL_TOKENS)
        for w in words:
            if w not in tokens:
                tokens.append(w)
        if len(tokens) > size:
            raise CorpusError(f"vocabulary needs {len(tokens)} entries but size is {size}")
        tokens.extend(f"<r{i}>" for i in range(len(tokens), size))
        self.tokens = tokens
        self.index = {w: i for i, w in enumerate(tokens)}

    @classmethod
    def build(cls, size: int, grammar: TemplateGrammar = None) -> "Vocabulary":
        grammar = grammar or TemplateGrammar()
        return cls(INSTRUCTION_TEXT.split() + grammar.words(), size)

    def __len__(self):
        return len(self.tokens)

    def encode(self, text_or_words, add_eos=False) -> List[int]:
        words = text_or_words.lower().split() if isinstance(text_or_words, str) else text_or_words
        ids = [self.index.get(w, UNK_ID) for w in words]
        if add_eos:
            ids.append(EOS_ID)
        return ids

    def decode_words(self, ids: Iterable[int]) -> List[str]:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i == PAD_ID:
                continue
            words.append(self.tokens[i])
        return words

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode_words(ids))
