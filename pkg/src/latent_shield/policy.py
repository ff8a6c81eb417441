"""Actor-critic trained inside imagined latent trajectories."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numerics import Adam, mlp
from .srssm import SRSSM, ImaginedTrajectory, Latent


@dataclass
class AgentConfig:
    discount: float = 0.99
    lam: float = 0.95
    horizon: int = 15
    actor_lr: float = 8e-5
    value_lr: float = 8e-5
    entropy: float = 1e-3
    explore_noise: float = 0.3  # variance of the continuous exploration noise
    explore_mix: float = 0.1  # uniform mixing for discrete exploration
    hidden: int = 200
    layers: int = 2
    return_norm: bool = True
    discrete_grad: str = "dynamics"  # dynamics (straight-through) | reinforce
    imagine_starts: int | None = None  # random subset of posterior states to imagine from

    def __post_init__(self):
        if self.discrete_grad not in ("dynamics", "reinforce"):
            raise ValueError(f"unknown discrete gradient estimator {self.discrete_grad!r}")


class Actor(nn.Module):
    """Categorical policy over discrete actions or tanh-squashed Gaussian for a scalar."""

    def __init__(self, feat: int, n_actions: int, discrete: bool, hidden: int, layers: int = 2):
        super().__init__()
        self.discrete = discrete
        self.n_actions = n_actions
        out = n_actions if discrete else 2
        self.net = mlp([feat] + [hidden] * layers + [out])

    def dist_params(self, feat: torch.Tensor):
        out = self.net(feat)
        if self.discrete:
            return out
        mean, raw = out.chunk(2, -1)
        return mean, F.softplus(raw) + 0.1

    def mode(self, feat: torch.Tensor) -> torch.Tensor:
        if self.discrete:
            return F.one_hot(self.net(feat).argmax(-1), self.n_actions).float()
        mean, _ = self.dist_params(feat)
        return torch.tanh(mean)

    def sample(self, feat: torch.Tensor, noise_std: float = 0.0,
               generator: torch.Generator | None = None) -> torch.Tensor:
        """Encoded action sample; reparameterised for continuous actions.

        ``noise_std`` perturbs the logits (discrete) or the squashed action
        (continuous) with Gaussian noise. Discrete samples carry a
        straight-through gradient to the action probabilities.
        """
        if self.discrete:
            logits = self.net(feat)
            if noise_std > 0:
                logits = logits + noise_std * torch.randn(logits.shape, generator=generator)
            probs = torch.softmax(logits, -1)
            idx = torch.multinomial(probs.reshape(-1, self.n_actions).detach(), 1, generator=generator)
            onehot = F.one_hot(idx.reshape(logits.shape[:-1]), self.n_actions).float()
            return onehot + probs - probs.detach()
        mean, std = self.dist_params(feat)
        eps = torch.randn(mean.shape, generator=generator)
        a = torch.tanh(mean + std * eps)
        if noise_std > 0:
            a = torch.clamp(a + noise_std * torch.randn(a.shape, generator=generator), -1.0, 1.0)
        return a

    def forward(self, feat, noise_std=0.0, generator=None):
        return self.sample(feat, noise_std, generator)

    def log_prob(self, feat: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        if not self.discrete:
            raise NotImplementedError("log_prob is only used for discrete actions")
        logp = torch.log_softmax(self.net(feat), -1)
        return (logp * action).sum(-1)

    def entropy(self, feat: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        if self.discrete:
            logp = torch.log_softmax(self.net(feat), -1)
            return -(logp.exp() * logp).sum(-1)
        # Gaussian entropy plus a one-sample estimate of the tanh correction
        mean, std = self.dist_params(feat)
        u = mean + std * torch.randn(mean.shape, generator=generator)
        gauss = (0.5 * math.log(2 * math.pi * math.e) + torch.log(std)).sum(-1)
        jac = (2 * (math.log(2.0) - u - F.softplus(-2 * u))).sum(-1)
        return gauss + jac


class Critic(nn.Module):
    def __init__(self, feat: int, hidden: int, layers: int = 2):
        super().__init__()
        self.net = mlp([feat] + [hidden] * layers + [1])

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return self.net(feat).squeeze(-1)


def act(actor: Actor, state: Latent, explore: bool, generator: torch.Generator | None = None,
        explore_noise: float = 0.3, explore_mix: float = 0.1):
    """Environment action for a single latent state.

    Returns an int for discrete actions and a float in [-1, 1] otherwise.
    """
    with torch.no_grad():
        feat = state.feat
        if actor.discrete:
            if not explore:
                return int(actor.net(feat).argmax(-1).reshape(-1)[0])
            if float(torch.rand((), generator=generator)) < explore_mix:
                return int(torch.randint(actor.n_actions, (), generator=generator))
            return int(actor.sample(feat, 0.0, generator).argmax(-1).reshape(-1)[0])
        if not explore:
            return float(actor.mode(feat).reshape(-1)[0])
        a = actor.sample(feat, 0.0, generator).reshape(-1)[0]
        a = a + math.sqrt(explore_noise) * torch.randn((), generator=generator)
        return float(torch.clamp(a, -1.0, 1.0))


def lambda_returns(rewards: torch.Tensor, values: torch.Tensor, discount: float, lam: float) -> torch.Tensor:
    """TD(lambda) targets.

    ``rewards[t]`` is received on entering state ``t + 1`` and ``values`` holds
    ``V(s_0) .. V(s_I)``. Returns targets for states ``0 .. I-1``:
    ``G_t = r_t + discount * ((1 - lam) V(s_{t+1}) + lam G_{t+1})`` with
    ``G_I = V(s_I)``.
    """
    I = rewards.shape[0]
    if values.shape[0] != I + 1:
        raise ValueError("values must have one more step than rewards")
    out = []
    nxt = values[I]
    for t in reversed(range(I)):
        nxt = rewards[t] + discount * ((1 - lam) * values[t + 1] + lam * nxt)
        out.append(nxt)
    return torch.stack(out[::-1])


class ActorCritic:
    """Holds the actor, critic and their optimisers."""

    def __init__(self, feat: int, n_actions: int, discrete: bool, cfg: AgentConfig):
        self.cfg = cfg
        self.actor = Actor(feat, n_actions, discrete, cfg.hidden, cfg.layers)
        self.critic = Critic(feat, cfg.hidden, cfg.layers)
        self.actor_opt = Adam(self.actor, cfg.actor_lr)
        self.critic_opt = Adam(self.critic, cfg.value_lr)
        self.return_scale: float | None = None

    def update(self, model: SRSSM, start: Latent, generator: torch.Generator | None = None) -> dict:
        """Imagine from ``start`` states and take one actor and one critic step."""
        cfg = self.cfg
        start = start.detach().reshape(-1)
        n = start.h.shape[0]
        if cfg.imagine_starts is not None and cfg.imagine_starts < n:
            pick = torch.randperm(n, generator=generator)[: cfg.imagine_starts]
            start = start.index(pick)
        params = list(model.parameters())
        for p in params:
            p.requires_grad_(False)
        try:
            traj = model.imagine(start, self.actor, cfg.horizon, 0.0, None, generator)
        finally:
            for p in params:
                p.requires_grad_(True)
        return self.update_from(traj, generator)

    def update_from(self, traj: ImaginedTrajectory, generator: torch.Generator | None = None) -> dict:
        cfg = self.cfg
        feat = traj.feat
        values = self.critic(feat)
        targets = lambda_returns(traj.rewards, values, cfg.discount, cfg.lam)
        I = traj.horizon
        weight = (cfg.discount ** torch.arange(I, dtype=torch.float32)).unsqueeze(-1)

        scale = 1.0
        if cfg.return_norm:
            # running 5th-95th percentile spread of the returns, floored at 1
            with torch.no_grad():
                flat = targets.detach().flatten()
                spread = float(torch.quantile(flat, 0.95) - torch.quantile(flat, 0.05))
            prev = self.return_scale
            self.return_scale = spread if prev is None else 0.99 * prev + 0.01 * spread
            scale = max(self.return_scale, 1.0)

        ent = self.actor.entropy(feat[:-1].detach(), generator)
        if self.actor.discrete and cfg.discrete_grad == "reinforce":
            adv = (targets - values[:-1]).detach() / scale
            logp = self.actor.log_prob(feat[:-1].detach(), traj.actions.detach())
            objective = logp * adv
        else:
            objective = targets / scale
        actor_loss = -(weight * (objective + cfg.entropy * ent)).mean()
        if not torch.isfinite(actor_loss):
            raise FloatingPointError("non-finite actor loss")
        self.actor_opt.zero_grad()
        actor_loss.backward(inputs=list(self.actor.parameters()))
        self.actor_opt.step()

        value_pred = self.critic(feat[:-1].detach())
        critic_loss = 0.5 * (weight * (value_pred - targets.detach()) ** 2).mean()
        if not torch.isfinite(critic_loss):
            raise FloatingPointError("non-finite critic loss")
        self.critic_opt.zero_grad()
        critic_loss.backward()
        self.critic_opt.step()
        return {
            "actor_loss": actor_loss.item(), "critic_loss": critic_loss.item(),
            "entropy": ent.mean().item(), "value": values.mean().item(),
            "return": targets.mean().item(),
        }
