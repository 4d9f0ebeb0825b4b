"""scikit-learn style wrapper around the two-stage training pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import discriminator as disc
from . import generator as gen
from . import trainer as T
from .data import EncodedSet, Vocabulary, build_vocab, encode_caption
from .metrics import cider_d


def _check_features(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
    if X.ndim != 3:
        raise ValueError(f"expected region features of shape (n_images, regions, dim), got {X.shape}")
    return X


def _check_captions(y, n: int) -> list:
    if len(y) != n:
        raise ValueError(f"{n} images but {len(y)} captions")
    out = []
    for cap in y:
        toks = cap.split() if isinstance(cap, str) else [str(t) for t in cap]
        if not toks:
            raise ValueError("empty caption")
        out.append(toks)
    return out


class AttendCaptioner(BaseEstimator):
    """Attention captioner, MLE-pretrained on ``(X, y)`` and optionally
    fine-tuned adversarially on a styled set ``(X_style, y_style)``.

    ``X`` holds region features ``(n_images, regions, dim)``; ``y`` holds one
    caption per row (a string or a token list).
    """

    def __init__(self, embed_dim=32, hidden=64, attn_dim=32, lam1=1.0, lam2=0.1, n_roll=5,
                 pretrain_epochs=30, disc_pretrain_steps=100, adv_epochs=20, gen_lr=1e-4,
                 critic_lr=5e-5, gen_batch=64, critic_batch=80, max_len=15, random_state=0):
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.attn_dim = attn_dim
        self.lam1 = lam1
        self.lam2 = lam2
        self.n_roll = n_roll
        self.pretrain_epochs = pretrain_epochs
        self.disc_pretrain_steps = disc_pretrain_steps
        self.adv_epochs = adv_epochs
        self.gen_lr = gen_lr
        self.critic_lr = critic_lr
        self.gen_batch = gen_batch
        self.critic_batch = critic_batch
        self.max_len = max_len
        self.random_state = random_state

    def _train_config(self) -> T.TrainConfig:
        cfg = T.TrainConfig(lam1=self.lam1, lam2=self.lam2, n_roll=self.n_roll, gen_lr=self.gen_lr,
                            critic_lr=self.critic_lr, gen_batch=self.gen_batch, critic_batch=self.critic_batch,
                            adv_epochs=self.adv_epochs, pretrain_epochs=self.pretrain_epochs,
                            disc_pretrain_steps=self.disc_pretrain_steps, max_len=self.max_len,
                            seed=int(self.random_state or 0))
        cfg.check()
        return cfg

    def _encode(self, X, caps) -> EncodedSet:
        toks = np.stack([encode_caption(c, self.vocab_, self.max_len + 1) for c in caps])
        return EncodedSet(X, toks, [str(i) for i in range(len(caps))])

    def fit(self, X, y, X_style=None, y_style=None):
        X = _check_features(X)
        caps = _check_captions(y, len(X))
        cfg = self._train_config()
        style_caps = None
        if X_style is not None:
            X_style = _check_features(X_style)
            style_caps = _check_captions(y_style, len(X_style))
        self.vocab_: Vocabulary = build_vocab(caps + (style_caps or []))
        self.n_features_in_ = X.shape[2]
        gcfg = gen.GeneratorConfig(len(self.vocab_), X.shape[2], self.embed_dim, self.hidden, self.attn_dim)
        params = gen.init_generator(gcfg, cfg.seed)
        res = T.pretrain_generator(self._encode(X, caps), None, cfg, params)
        self.generator_ = res.params
        self.log_ = res.log
        if style_caps is not None:
            styled = self._encode(X_style, style_caps)
            critic = disc.init_critic(disc.CriticConfig(len(self.vocab_), self.max_len, clip=cfg.clip), cfg.seed)
            # the critic is pretrained on the factual pairs, like the generator
            critic, _, _ = T.pretrain_discriminator(self.generator_, self._encode(X, caps), cfg, critic)
            state = T.adversarial_train(styled, None, T.start_adversarial(self.generator_, critic, cfg), cfg)
            self.generator_, self.critic_ = state.gen_params, state.disc_params
            self.log_ = state.log
        return self

    def predict(self, X) -> list:
        """Greedy captions as token lists."""
        check_is_fitted(self, "generator_")
        X = _check_features(X)
        if X.shape[2] != self.n_features_in_:
            raise ValueError(f"X has feature dim {X.shape[2]}, fitted with {self.n_features_in_}")
        return [self.vocab_.decode(t) for t in gen.greedy_decode(X, self.generator_, self.max_len)]

    def score(self, X, y) -> float:
        """CIDEr-D of greedy captions; ``y`` gives one caption or a list of
        reference captions per image."""
        preds = self.predict(X)
        refs = []
        for r in y:
            if isinstance(r, str) or (r and isinstance(r[0], str) and " " not in r[0]):
                refs.append(_check_captions([r], 1))
            else:
                refs.append(_check_captions(list(r), len(r)))
        return cider_d(preds, refs)
