"""Recurrent state-space world model with a violation head.

The compact latent state is ``[h, z]``: a deterministic GRU state ``h`` and a
diagonal-Gaussian stochastic state ``z``. Besides the observation and reward
decoders the model predicts, from the same compact state, whether the state
violates the safety specification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .numerics import DiagGaussian, GRUCell, mlp

# policy(feat, noise_std, generator) -> encoded action
PolicyFn = Callable[[torch.Tensor, float, Optional[torch.Generator]], torch.Tensor]


@dataclass
class ModelConfig:
    obs_shape: tuple
    n_actions: int
    discrete: bool
    deter: int = 200
    stoch: int = 30
    hidden: int = 200
    embed: int = 1024
    cnn_depth: int = 8
    bit_depth: Optional[int] = 5
    kl_prior_share: float = 0.8
    free_nats: float = 0.0
    violation_weight: float = 3.0
    std_floor: float = nx.STD_FLOOR
    obs_scale: Optional[Sequence[float]] = None  # per-component divisor for vector observations

    @property
    def image(self) -> bool:
        return len(self.obs_shape) == 3

    @property
    def action_dim(self) -> int:
        return self.n_actions if self.discrete else 1


@dataclass
class Latent:
    h: torch.Tensor
    z: torch.Tensor

    @property
    def feat(self) -> torch.Tensor:
        return torch.cat([self.h, self.z], -1)

    def detach(self) -> "Latent":
        return Latent(self.h.detach(), self.z.detach())

    def reshape(self, *shape) -> "Latent":
        return Latent(self.h.reshape(*shape, self.h.shape[-1]), self.z.reshape(*shape, self.z.shape[-1]))

    def repeat(self, n: int) -> "Latent":
        """Stack ``n`` copies along a new leading axis, flattened into the batch."""
        h = self.h.reshape(-1, self.h.shape[-1])
        z = self.z.reshape(-1, self.z.shape[-1])
        return Latent(h.repeat_interleave(n, 0), z.repeat_interleave(n, 0))

    def index(self, i) -> "Latent":
        return Latent(self.h[i], self.z[i])


@dataclass
class ModelLoss:
    total: torch.Tensor
    observation: torch.Tensor
    reward: torch.Tensor
    kl: torch.Tensor
    violation: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("total", "observation", "reward", "kl", "violation")}


@dataclass
class ImaginedTrajectory:
    """States ``0..H`` (index 0 is the start) and per-step predictions for ``1..H``."""

    h: torch.Tensor  # [H+1, B, deter]
    z: torch.Tensor  # [H+1, B, stoch]
    actions: torch.Tensor  # [H, B, action_dim]
    rewards: torch.Tensor  # [H, B]
    violation: torch.Tensor  # [H, B] probabilities

    @property
    def feat(self) -> torch.Tensor:
        return torch.cat([self.h, self.z], -1)

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


class ConvEncoder(nn.Module):
    def __init__(self, size: int, depth: int, embed: int):
        super().__init__()
        n = int(round(math.log2(size))) - 2
        if 2 ** (n + 2) != size or n < 1:
            raise ValueError(f"image size {size} must be a power of two >= 8")
        layers: list[nn.Module] = []
        ch = 3
        for k in range(n):
            out = depth * 2 ** k
            layers += [nn.Conv2d(ch, out, 4, stride=2, padding=1), nn.ELU()]
            ch = out
        self.convs = nn.Sequential(*layers)
        flat = ch * 16
        self.proj = nn.Identity() if flat == embed else nn.Linear(flat, embed)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        lead = x.shape[:-3]
        x = x.reshape(-1, *x.shape[-3:]).permute(0, 3, 1, 2)
        y = self.convs(x).flatten(1)
        return self.proj(y).reshape(*lead, -1)


class ConvDecoder(nn.Module):
    def __init__(self, feat: int, size: int, depth: int):
        super().__init__()
        n = int(round(math.log2(size))) - 2
        self.top = depth * 2 ** (n - 1)
        self.fc = nn.Linear(feat, self.top * 16)
        layers: list[nn.Module] = []
        ch = self.top
        for k in reversed(range(n)):
            out = 3 if k == 0 else depth * 2 ** (k - 1)
            layers.append(nn.ConvTranspose2d(ch, out, 4, stride=2, padding=1))
            if k:
                layers.append(nn.ELU())
            ch = out
        self.deconvs = nn.Sequential(*layers)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        lead = feat.shape[:-1]
        x = self.fc(feat.reshape(-1, feat.shape[-1])).reshape(-1, self.top, 4, 4)
        y = self.deconvs(x).permute(0, 2, 3, 1)
        return y.reshape(*lead, *y.shape[1:])


class SRSSM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        feat = cfg.deter + cfg.stoch
        if cfg.image:
            self.encoder = ConvEncoder(cfg.obs_shape[0], cfg.cnn_depth, cfg.embed)
            self.decoder = ConvDecoder(feat, cfg.obs_shape[0], cfg.cnn_depth)
        else:
            dim = int(np.prod(cfg.obs_shape))
            self.encoder = mlp([dim, cfg.hidden, cfg.hidden, cfg.hidden, cfg.embed], act=nn.ReLU)
            self.decoder = mlp([feat, cfg.hidden, cfg.hidden, dim])
        self.img_in = mlp([cfg.stoch + cfg.action_dim, cfg.hidden], out_act=True)
        self.cell = GRUCell(cfg.hidden, cfg.deter)
        self.prior_net = mlp([cfg.deter, cfg.hidden, 2 * cfg.stoch])
        self.post_net = mlp([cfg.deter + cfg.embed, cfg.hidden, 2 * cfg.stoch])
        self.reward_head = mlp([feat, cfg.hidden, cfg.hidden, 1])
        self.violation_head = mlp([feat, cfg.hidden, cfg.hidden, 1])
        if cfg.obs_scale is not None:
            self.register_buffer("obs_scale", torch.as_tensor(cfg.obs_scale, dtype=torch.float32))
        else:
            self.obs_scale = None

    # -- encoding -----------------------------------------------------------

    def preprocess(self, obs) -> torch.Tensor:
        obs = torch.as_tensor(obs)
        if self.cfg.image:
            if obs.dtype == torch.uint8:
                x = obs.float()
            else:
                x = torch.round(obs.float() * 255.0)
            if self.cfg.bit_depth is not None and self.cfg.bit_depth < 8:
                x = torch.floor(x / 2 ** (8 - self.cfg.bit_depth)) / 2 ** self.cfg.bit_depth
            else:
                x = x / 256.0
            return x - 0.5
        x = obs.float()
        if self.obs_scale is not None:
            x = x / self.obs_scale
        return x

    def encode(self, obs) -> torch.Tensor:
        return self.encoder(self.preprocess(obs))

    def encode_action(self, action) -> torch.Tensor:
        """One-hot for discrete actions, a 1-vector for continuous ones."""
        a = torch.as_tensor(action)
        if self.cfg.discrete:
            if a.dtype.is_floating_point and a.shape[-1:] == (self.cfg.n_actions,):
                return a.float()
            return nn.functional.one_hot(a.long(), self.cfg.n_actions).float()
        a = a.float()
        if a.shape[-1:] != (1,):
            a = a.unsqueeze(-1)
        return a

    # -- latent dynamics ----------------------------------------------------

    def initial_state(self, *batch: int) -> Latent:
        return Latent(torch.zeros(*batch, self.cfg.deter), torch.zeros(*batch, self.cfg.stoch))

    def recurrent_step(self, prev: Latent, action: torch.Tensor) -> torch.Tensor:
        x = self.img_in(torch.cat([prev.z, action], -1))
        return self.cell(prev.h, x)

    def _dist(self, out: torch.Tensor) -> DiagGaussian:
        mean, raw = out.chunk(2, -1)
        return DiagGaussian.from_raw(mean, raw, self.cfg.std_floor)

    def prior(self, h: torch.Tensor) -> DiagGaussian:
        return self._dist(self.prior_net(h))

    def posterior(self, h: torch.Tensor, embed: torch.Tensor) -> DiagGaussian:
        return self._dist(self.post_net(torch.cat([h, embed], -1)))

    def obs_step(self, prev: Latent, action: torch.Tensor, embed: torch.Tensor,
                 generator: torch.Generator | None = None, sample: bool = True):
        h = self.recurrent_step(prev, action)
        post = self.posterior(h, embed)
        prior = self.prior(h)
        z = nx.sample_reparam(post, generator) if sample else post.mean
        return Latent(h, z), post, prior

    def img_step(self, prev: Latent, action: torch.Tensor, generator: torch.Generator | None = None,
                 sample: bool = True) -> Latent:
        h = self.recurrent_step(prev, action)
        prior = self.prior(h)
        z = nx.sample_reparam(prior, generator) if sample else prior.mean
        return Latent(h, z)

    # -- heads ----------------------------------------------------------------

    def decode_observation(self, s: Latent) -> torch.Tensor:
        return self.decoder(s.feat)

    def predict_reward(self, s: Latent | torch.Tensor) -> torch.Tensor:
        feat = s.feat if isinstance(s, Latent) else s
        return self.reward_head(feat).squeeze(-1)

    def violation_logit(self, s: Latent | torch.Tensor) -> torch.Tensor:
        feat = s.feat if isinstance(s, Latent) else s
        return self.violation_head(feat).squeeze(-1)

    def predict_violation(self, s: Latent | torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.violation_logit(s))

    # -- training -------------------------------------------------------------

    def observe_sequence(self, obs, actions, rewards, violations,
                         generator: torch.Generator | None = None,
                         start: Latent | None = None):
        """Filter ``B`` sequences of length ``L``; returns states ``[B, L]`` and the model loss.

        ``actions[:, t]`` is the action that led to ``obs[:, t]``; rewards and
        violation flags belong to the same step.
        """
        obs = torch.as_tensor(obs)
        actions = self.encode_action(actions)
        rewards = torch.as_tensor(rewards, dtype=torch.float32)
        violations = torch.as_tensor(violations, dtype=torch.float32)
        B, L = rewards.shape
        if obs.shape[:2] != (B, L) or actions.shape[:2] != (B, L) or violations.shape != (B, L):
            raise ValueError("sequence length mismatch between observations, actions, rewards and flags")
        target = self.preprocess(obs)
        embed = self.encoder(target)
        state = start or self.initial_state(B)
        hs, zs, posts_m, posts_s, priors_m, priors_s = [], [], [], [], [], []
        for t in range(L):
            state, post, prior = self.obs_step(state, actions[:, t], embed[:, t], generator)
            hs.append(state.h)
            zs.append(state.z)
            posts_m.append(post.mean)
            posts_s.append(post.std)
            priors_m.append(prior.mean)
            priors_s.append(prior.std)
        states = Latent(torch.stack(hs, 1), torch.stack(zs, 1))
        post = DiagGaussian(torch.stack(posts_m, 1), torch.stack(posts_s, 1))
        prior = DiagGaussian(torch.stack(priors_m, 1), torch.stack(priors_s, 1))

        feat = states.feat
        recon = self.decoder(feat)
        obs_dims = tuple(range(2, recon.dim()))
        obs_loss = 0.5 * ((recon - target) ** 2).sum(obs_dims).mean()
        reward_loss = 0.5 * ((self.predict_reward(feat) - rewards) ** 2).mean()
        kl = nx.balanced_kl(post, prior, self.cfg.kl_prior_share)
        if self.cfg.free_nats > 0:
            kl = torch.clamp(kl, min=self.cfg.free_nats)
        kl_loss = kl.mean()
        viol_loss = nx.weighted_bce(self.violation_logit(feat), violations, self.cfg.violation_weight).mean()
        total = obs_loss + reward_loss + kl_loss + viol_loss
        return states, ModelLoss(total, obs_loss, reward_loss, kl_loss, viol_loss)

    # -- imagination ----------------------------------------------------------

    def imagine(self, start: Latent, policy: PolicyFn, horizon: int, noise_std: float = 0.0,
                first_action: torch.Tensor | None = None,
                generator: torch.Generator | None = None) -> ImaginedTrajectory:
        """Roll the prior forward ``horizon`` steps without observations."""
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        state = start
        hs, zs, acts, rews, viols = [start.h], [start.z], [], [], []
        for i in range(horizon):
            if i == 0 and first_action is not None:
                a = self.encode_action(first_action)
                if a.shape[:-1] != state.h.shape[:-1]:
                    a = a.expand(*state.h.shape[:-1], a.shape[-1])
            else:
                a = policy(state.feat, noise_std, generator)
            state = self.img_step(state, a, generator)
            hs.append(state.h)
            zs.append(state.z)
            acts.append(a)
            rews.append(self.predict_reward(state))
            viols.append(self.predict_violation(state))
        return ImaginedTrajectory(torch.stack(hs), torch.stack(zs), torch.stack(acts),
                                  torch.stack(rews), torch.stack(viols))

    @torch.no_grad()
    def rollout_unsafe(self, start: Latent, first_actions: Sequence, policy: PolicyFn, horizon: int,
                       n_samples: int, noise_std: float,
                       generator: torch.Generator | None = None) -> np.ndarray:
        """Unsafe flags ``[len(first_actions), n_samples]`` for sampled imagined futures.

        A trajectory is unsafe when any of its ``horizon`` imagined states has
        violation probability >= 0.5.
        """
        M = len(first_actions)
        base = Latent(start.h.reshape(1, -1), start.z.reshape(1, -1))
        s = base.repeat(M * n_samples)
        firsts = torch.stack([self.encode_action(torch.as_tensor(a)).reshape(-1) for a in first_actions])
        firsts = firsts.repeat_interleave(n_samples, 0)
        traj = self.imagine(s, policy, horizon, noise_std, firsts, generator)
        unsafe = (traj.violation >= 0.5).any(0)
        return unsafe.reshape(M, n_samples).numpy()

    # -- checkpoints ------------------------------------------------------------

    def param_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()
