"""
Synthetic multimodal corpus standing in for brain recordings.

Generative process for one sample (all randomness derived from the spec seed):

    s        ~ N(0, I)                               latent content
    targets  = grammar(s)                            template sentence + <eos>
    c        = abstractness(template)                covariate in [1, 5]
    m*       ~ tilt(proportions, c)                  planted informative modality
    aux[m*]  = A[m*] s + noise                       informative auxiliary sequence
    aux[m]   = noise                       (m != m*) uninformative
    brain    = B [s ; onehot(m*)] + noise

Modality 0 plays the text role: its mixture weight is tilted towards abstract
templates, so text-informative samples carry higher covariates.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .exceptions import CorpusError
from .vocab import EOS_ID, TemplateGrammar, Vocabulary

logger = logging.getLogger(__name__)

FORMAT_NAME = "modroute-corpus"
FORMAT_VERSION = 1
MODALITY_NAMES = ("text", "image", "audio")


def modality_name(index: int) -> str:
    return MODALITY_NAMES[index] if index < len(MODALITY_NAMES) else f"modality{index}"


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    n_train: int = 2400
    n_val: int = 300
    n_test: int = 300
    d_brain: int = 128
    d_latent: int = 16
    num_modalities: int = 3
    vocab_size: int = 256
    noise: float = 0.1
    proportions: Tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    abstractness_coupling: float = 0.8
    d_raw: int = 32
    aux_min_len: int = 4
    aux_max_len: int = 16

    @property
    def total(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def validate(self) -> "CorpusSpec":
        if min(self.n_train, self.n_val, self.n_test) <= 0:
            raise CorpusError("sample counts must be positive")
        if self.noise < 0:
            raise CorpusError(f"noise level must be >= 0, got {self.noise}")
        if len(self.proportions) != self.num_modalities:
            raise CorpusError(
                f"{len(self.proportions)} mixture proportions for {self.num_modalities} modalities"
            )
        if any(p < 0 for p in self.proportions) or abs(sum(self.proportions) - 1.0) > 1e-9:
            raise CorpusError(f"mixture proportions must be non-negative and sum to 1, got {self.proportions}")
        if not 1 <= self.aux_min_len <= self.aux_max_len:
            raise CorpusError("auxiliary lengths must satisfy 1 <= aux_min_len <= aux_max_len")
        if self.d_brain <= 0 or self.d_raw <= 0:
            raise CorpusError("dimensions must be positive")
        required = TemplateGrammar().required_latent_dim
        if self.d_latent < required:
            raise CorpusError(f"d_latent must be at least {required} for the template grammar")
        return self

    def spec_hash(self) -> str:
        canonical = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass
class BrainSample:
    sample_id: int
    brain: np.ndarray
    auxiliary: Tuple[np.ndarray, ...]
    targets: Tuple[int, ...]
    oracle_modality: int
    covariate: float
    template: int = -1
    latent: np.ndarray = field(default=None, repr=False)


@dataclass
class MixingMatrices:
    """Fixed linear maps of the generative process."""

    brain: np.ndarray      # [d_brain, d_latent + M]
    auxiliary: np.ndarray  # [M, aux_max_len, d_raw, d_latent]

    @classmethod
    def from_rng(cls, rng: np.random.Generator, spec: CorpusSpec) -> "MixingMatrices":
        k = spec.d_latent + spec.num_modalities
        brain = rng.standard_normal((spec.d_brain, k)) / np.sqrt(k)
        aux = rng.standard_normal((spec.num_modalities, spec.aux_max_len, spec.d_raw, spec.d_latent))
        return cls(brain=brain, auxiliary=aux / np.sqrt(spec.d_latent))


@dataclass
class Corpus:
    spec: CorpusSpec
    samples: List[BrainSample]

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def tilted_proportions(spec: CorpusSpec, covariate: float) -> np.ndarray:
    """Mixture over modalities with the text weight scaled by exp(coupling * (c - 3))."""
    probs = np.asarray(spec.proportions, dtype=np.float64).copy()
    probs[0] *= np.exp(spec.abstractness_coupling * (covariate - 3.0))
    return probs / probs.sum()


def make_sample(
    sample_id: int,
    latent: np.ndarray,
    modality: int,
    lengths: Sequence[int],
    rng: np.random.Generator,
    spec: CorpusSpec,
    mixing: MixingMatrices,
    grammar: TemplateGrammar,
    vocab: Vocabulary,
) -> BrainSample:
    """Render one sample from its latent, planted modality and auxiliary lengths."""
    template, words = grammar.realize(latent)
    targets = tuple(vocab.encode(words) + [EOS_ID])

    auxiliary = []
    for m in range(spec.num_modalities):
        n = int(lengths[m])
        noise = spec.noise * rng.standard_normal((n, spec.d_raw))
        if m == modality:
            signal = np.einsum("nrl,l->nr", mixing.auxiliary[m, :n], latent)
            auxiliary.append(signal + noise)
        else:
            auxiliary.append(noise)

    onehot = np.zeros(spec.num_modalities)
    onehot[modality] = 1.0
    brain = mixing.brain @ np.concatenate([latent, onehot])
    brain = brain + spec.noise * rng.standard_normal(spec.d_brain)
    norm = float(np.linalg.norm(brain))
    if not 0.1 <= norm <= 100.0:
        raise CorpusError(f"sample {sample_id}: brain vector norm {norm:.3g} outside [0.1, 100]")

    return BrainSample(
        sample_id=sample_id,
        brain=brain,
        auxiliary=tuple(auxiliary),
        targets=targets,
        oracle_modality=int(modality),
        covariate=grammar.abstractness(template),
        template=template,
        latent=latent,
    )


def generate(spec: CorpusSpec) -> Corpus:
    spec.validate()
    grammar = TemplateGrammar()
    vocab = Vocabulary.build(spec.vocab_size, grammar)

    root = np.random.SeedSequence(spec.seed)
    mixing_seq, *sample_seqs = root.spawn(1 + spec.total)
    mixing = MixingMatrices.from_rng(np.random.default_rng(mixing_seq), spec)

    samples = []
    for i, seq in enumerate(sample_seqs):
        rng = np.random.default_rng(seq)
        latent = rng.standard_normal(spec.d_latent)
        template = grammar.template_index(latent)
        probs = tilted_proportions(spec, grammar.abstractness(template))
        modality = int(rng.choice(spec.num_modalities, p=probs))
        lengths = rng.integers(spec.aux_min_len, spec.aux_max_len + 1, size=spec.num_modalities)
        samples.append(make_sample(i, latent, modality, lengths, rng, spec, mixing, grammar, vocab))

    logger.info("generated %d samples (spec %s)", len(samples), spec.spec_hash())
    return Corpus(spec=spec, samples=samples)


def split(corpus: Corpus, spec: CorpusSpec = None) -> Tuple[List[BrainSample], List[BrainSample], List[BrainSample]]:
    """Seed-deterministic disjoint train/val/test partition."""
    spec = spec or corpus.spec
    if spec.total > len(corpus):
        raise CorpusError(f"split counts sum to {spec.total} but the corpus holds {len(corpus)} samples")
    order = np.random.default_rng([spec.seed, 1]).permutation(len(corpus))
    train = [corpus[i] for i in order[: spec.n_train]]
    val = [corpus[i] for i in order[spec.n_train: spec.n_train + spec.n_val]]
    test = [corpus[i] for i in order[spec.n_train + spec.n_val: spec.total]]
    return train, val, test


def select_split(corpus: Corpus, name: str) -> List[BrainSample]:
    train, val, test = split(corpus)
    try:
        return {"train": train, "val": val, "test": test}[name]
    except KeyError:
        raise CorpusError(f"unknown split {name!r}; expected train, val or test") from None


def _spec_from_dict(data: dict) -> CorpusSpec:
    data = dict(data)
    data["proportions"] = tuple(data["proportions"])
    return CorpusSpec(**data)


def write_corpus(corpus: Corpus, path) -> Path:
    """Line-delimited records: a header line, then one JSON object per sample."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "spec_hash": corpus.spec.spec_hash(),
        "spec": asdict(corpus.spec),
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for s in corpus.samples:
            record = {"id": s.sample_id, "brain": s.brain.tolist()}
            for m, aux in enumerate(s.auxiliary):
                record[f"aux_{m}"] = aux.tolist()
            record["targets"] = list(s.targets)
            record["oracle"] = s.oracle_modality
            record["covariate"] = s.covariate
            record["template"] = s.template
            f.write(json.dumps(record) + "\n")
    logger.info("wrote %d samples to %s", len(corpus), path)
    return path


def read_corpus(path) -> Corpus:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            header = json.loads(f.readline())
            if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
                raise CorpusError(f"{path}: not a {FORMAT_NAME} v{FORMAT_VERSION} file")
            spec = _spec_from_dict(header["spec"])
            if spec.spec_hash() != header.get("spec_hash"):
                raise CorpusError(f"{path}: spec hash mismatch")
            samples = []
            for lineno, line in enumerate(f, start=2):
                if not line.strip():
                    continue
                rec = json.loads(line)
                samples.append(
                    BrainSample(
                        sample_id=int(rec["id"]),
                        brain=np.asarray(rec["brain"], dtype=np.float64),
                        auxiliary=tuple(
                            np.asarray(rec[f"aux_{m}"], dtype=np.float64).reshape(-1, spec.d_raw)
                            for m in range(spec.num_modalities)
                        ),
                        targets=tuple(int(t) for t in rec["targets"]),
                        oracle_modality=int(rec["oracle"]),
                        covariate=float(rec["covariate"]),
                        template=int(rec.get("template", -1)),
                    )
                )
    except (json.JSONDecodeError, KeyError) as e:
        raise CorpusError(f"{path}: corrupt corpus file ({e})") from e
    return Corpus(spec=spec, samples=samples)
