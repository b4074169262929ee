"""
BrainDecoder: every trainable component of the pipeline in one container.

    auxiliary encoders (training only) -> z_m         [B, M, Q, d]
    brain projectors                   -> z_b         [B, M, Q, d]
    router                             -> w           [B, M]
    fusion                             -> H           [B, Q, d]
    decoder([S; H])                    -> caption
"""

import logging
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .config import Config
from .exceptions import CheckpointError
from .losses import build_prefix
from .models import AuxiliaryEncoder, Module, ProjectorEncoder, SoftPrompt, ToyCausalDecoder
from .router import RouterDecision, RouterParams, check_strategy, fuse, route
from .synthdata import BrainSample
from .tensor import Tensor
from .vocab import TemplateGrammar, Vocabulary

logger = logging.getLogger(__name__)

SINGLE_PROJECTOR = "single_projector"


class BrainDecoder(Module):
    def __init__(self, config: Config, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(config.model.seed)
        corpus, model = config.corpus, config.model
        d = model.d_model
        self.config = config
        self.vocab = Vocabulary.build(corpus.vocab_size, TemplateGrammar())

        self.aux_encoders = [
            AuxiliaryEncoder(rng, corpus.d_raw, d, model.num_queries) for _ in range(corpus.num_modalities)
        ]
        self.projectors = [
            ProjectorEncoder(
                rng,
                corpus.d_brain,
                d,
                num_layers=model.num_layers,
                num_heads=model.num_heads,
                num_queries=model.num_queries,
                grid_tokens=model.grid_tokens,
            )
            for _ in range(corpus.num_modalities)
        ]
        self.router = RouterParams(rng, corpus.d_brain, d, corpus.num_modalities, hidden=config.router.hidden)
        self.decoder = ToyCausalDecoder(
            rng,
            model.vocab_size,
            d,
            num_layers=model.num_layers,
            num_heads=model.num_heads,
            max_positions=model.max_positions,
        )
        self.soft_prompt = None
        if config.ablation.use_soft_prompt:
            if config.ablation.soft_prompt_text_init:
                self.soft_prompt = SoftPrompt.from_instruction(
                    self.decoder.token_embedding, self.vocab, length=model.soft_prompt_len
                )
            else:
                self.soft_prompt = SoftPrompt.random(rng, model.soft_prompt_len, d)

    @property
    def num_modalities(self) -> int:
        return len(self.projectors)

    @classmethod
    def from_state(cls, config: Config, tensors) -> "BrainDecoder":
        model = cls(config)
        try:
            model.load_state_dict(tensors)
        except KeyError as e:
            raise CheckpointError(f"checkpoint does not match the model layout: {e}") from e
        return model

    # -- embeddings -------------------------------------------------------

    def auxiliary_embeddings(self, batch: Sequence[BrainSample]) -> Tensor:
        """z_m for every modality of every sample: [B, M, Q, d]."""
        per_modality = [
            encoder.encode([sample.auxiliary[m] for sample in batch])
            for m, encoder in enumerate(self.aux_encoders)
        ]
        return T.stack(per_modality, axis=1)

    def brain_embeddings(self, brain: Tensor) -> Tensor:
        """z_b from every projector: [B, M, Q, d]."""
        return T.stack([p.project(brain) for p in self.projectors], axis=1)

    @staticmethod
    def projector_keys(z_b: Tensor) -> Tensor:
        """One key per projector for similarity merge: mean over the Q positions, [B, M, d]."""
        return T.mean(z_b, axis=2)

    # -- routing ----------------------------------------------------------

    def decide(
        self,
        brain: Tensor,
        z_b: Tensor,
        strategy: str,
        *,
        rng: Optional[np.random.Generator] = None,
        training: bool = True,
    ) -> RouterDecision:
        single = self.config.ablation.single_projector
        if single >= 0:
            weights = np.zeros((brain.shape[0], self.num_modalities))
            weights[:, single] = 1.0
            return RouterDecision(weights=Tensor(weights), strategy=SINGLE_PROJECTOR, probs=weights)
        return route(
            self.router,
            strategy,
            brain,
            keys=self.projector_keys(z_b),
            temperature=self.config.router.temperature,
            rng=rng,
            training=training,
            inference_noise=self.config.router.inference_noise,
        )

    def fused(self, brain: Tensor, strategy: str, *, rng=None, training=True):
        z_b = self.brain_embeddings(brain)
        decision = self.decide(brain, z_b, strategy, rng=rng, training=training)
        return fuse(decision, z_b), decision, z_b

    # -- decoding ---------------------------------------------------------

    def prefix(self, z) -> Tensor:
        return build_prefix(self.soft_prompt, z)

    def caption(self, h: Tensor, max_len: Optional[int] = None) -> List[List[int]]:
        max_len = max_len or self.config.model.max_target_len
        return self.decoder.decode_greedy_batch(self.prefix(h), max_len)

    def trainable_parameters(self, phase: int, strategy: str):
        """Named parameters updated in each phase; auxiliary encoders are frozen in phase 2."""
        groups = [("projectors", self.projectors), ("decoder", self.decoder)]
        if self.soft_prompt is not None:
            groups.append(("soft_prompt", self.soft_prompt))
        if phase == 1:
            groups.insert(0, ("aux_encoders", self.aux_encoders))
        elif phase != 2:
            raise ValueError(f"unknown training phase {phase}")

        named = []
        for prefix, value in groups:
            modules = value if isinstance(value, list) else [value]
            for i, module in enumerate(modules):
                stem = f"{prefix}.{i}." if isinstance(value, list) else f"{prefix}."
                named.extend((stem + n, p) for n, p in module.named_parameters())
        if phase == 2 and self.config.ablation.single_projector < 0:
            check_strategy(strategy)
            named.extend(("router." + n, p) for n, p in self.router.strategy_parameters(strategy))
        return named
