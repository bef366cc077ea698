"""Three-stage training: bottleneck pretraining, reward-free encoder pretraining, fine-tuning."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .. import envs
from ..bottleneck import codebook_update_ema, quantize, vib_deterministic
from ..exploration import CandidateQueue, batch_intrinsic_reward, enqueue, intrinsic_reward
from ..metrics import codebook_stats
from ..numcore import Adam, Tensor, backward, concat, gather, load_checkpoint, log_softmax, save_checkpoint, stop_gradient
from ..objectives import (
    LossComponents,
    contrastive_loss,
    dqn_loss,
    proto_loss,
    soft_update,
    total_loss,
)
from .config import RunConfig
from .model import N_ACTIONS, Embedding, QNetwork, RepModel, frozen_copy, make_inverse_head, make_prototypes
from .replay import Batch, ReplayBuffer, ReplayError

log = logging.getLogger(__name__)

METRICS_HEADER = ["stage", "step", "loss_total", "loss_objective", "loss_vq", "loss_kl", "loss_q",
                  "codebook_perplexity", "epsilon", "reward_mean", "coverage"]
EVAL_HEADER = ["step", "start_row", "start_col", "return", "length", "success"]
TRACE_HEADER = ["step", "reward", "queue_fill", "codes"]
LOG_FILES = ("metrics.csv", "eval.csv", "trajectory.csv", "trajectory_finetune.csv", "intrinsic.csv")
RNG_NAMES = ("init", "env", "act", "sample", "vib", "misc", "task")


class StageOrderError(RuntimeError):
    pass


class DivergenceError(FloatingPointError):
    pass


def _fmt(x) -> str:
    return repr(float(x))


def _state_to_json(state: envs.MazeState | None):
    return None if state is None else asdict(state)


def _state_from_json(data) -> envs.MazeState | None:
    if data is None:
        return None
    data = dict(data)
    data["agent"] = tuple(data["agent"])
    data["goal"] = None if data["goal"] is None else tuple(data["goal"])
    return envs.MazeState(**data)


class Trainer:
    """Owns every module, buffer, RNG stream and loop counter of one run."""

    def __init__(self, cfg: RunConfig, out_dir: str | Path | None = None):
        self.cfg = cfg.validate()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        seqs = np.random.SeedSequence(cfg.seed).spawn(len(RNG_NAMES))
        self.rngs = {name: np.random.default_rng(s) for name, s in zip(RNG_NAMES, seqs)}
        pad = cfg.noise != "off" or cfg.pretrain_noise != "off"
        self.pre_spec = envs.EnvSpec(envs.make_layout(cfg.pretrain_env), cfg.render_mode,
                                     cfg.pretrain_noise, cfg.horizon, pad)
        self.task_spec = envs.EnvSpec(envs.make_layout(cfg.env), cfg.render_mode, cfg.noise,
                                      cfg.horizon, pad)
        obs_dim = self.pre_spec.obs_dim
        init = self.rngs["init"]
        self.model = RepModel(cfg, obs_dim, init)
        self.target_encoder = frozen_copy(self.model.encoder)
        self.target_predictor = frozen_copy(self.model.predictor)
        self.q = QNetwork(cfg, init)
        self.q_target = frozen_copy(self.q)
        self.protos = make_prototypes(cfg, init) if cfg.objective == "proto" else None
        self.protos_target = frozen_copy(self.protos) if self.protos is not None else None
        self.inverse_head = make_inverse_head(cfg, init) if cfg.objective.startswith("inverse") else None
        self.queue = CandidateQueue(cfg.queue_capacity, cfg.feature_dim, np.dtype(cfg.dtype))
        self.explore_buffer = ReplayBuffer(min(cfg.replay_capacity, max(cfg.stage2_end, 1)), obs_dim)
        self.task_buffer = ReplayBuffer(min(cfg.replay_capacity, max(cfg.stage3_end - cfg.stage2_end, 1)), obs_dim)
        self.optimizers: dict[str, Adam] = {}
        self.frame = 0
        self.stage_done = 0
        self.env_state: envs.MazeState | None = None
        self.episode = 0
        self.episode_return = 0.0
        self.visits = np.zeros(self.pre_spec.layout.n_cells, dtype=np.int64)
        self.last: dict[str, float] = {}
        self.eval_rows: list[list] = []
        self.finetune_returns: list[float] = []
        self._files: dict[str, object] = {}
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # ------------------------------------------------------------------ io
    def _writer(self, name: str, header: list[str]):
        if self.out_dir is None:
            return None
        if name not in self._files:
            path = self.out_dir / name
            new = not path.exists() or path.stat().st_size == 0
            fh = open(path, "a", newline="")
            w = csv.writer(fh)
            if new:
                w.writerow(header)
            self._files[name] = (fh, w)
        return self._files[name][1]

    def close(self) -> None:
        for fh, _ in self._files.values():
            fh.close()
        self._files.clear()

    def _flush(self) -> None:
        for fh, _ in self._files.values():
            fh.flush()

    def _log_sizes(self) -> dict[str, int]:
        if self.out_dir is None:
            return {}
        return {name: (self.out_dir / name).stat().st_size for name in LOG_FILES
                if (self.out_dir / name).exists()}

    def _truncate_logs(self, sizes: dict[str, int]) -> None:
        """Drop log rows written after the checkpoint so a resumed run appends cleanly."""
        if self.out_dir is None:
            return
        for name in LOG_FILES:
            path = self.out_dir / name
            if not path.exists():
                continue
            keep = sizes.get(name, 0)
            if path.stat().st_size > keep:
                with open(path, "r+b") as fh:
                    fh.truncate(keep)

    # ------------------------------------------------------------ helpers
    def _backward(self, loss: Tensor) -> None:
        # parameters outside the active optimizer still collect gradients; drop them first
        for mod in self._modules().values():
            mod.zero_grad()
        backward(loss)

    def _optimizer(self, key: str, params: dict) -> Adam:
        if key not in self.optimizers:
            self.optimizers[key] = Adam(params, lr=self.cfg.lr)
        return self.optimizers[key]

    def _rep_params(self, stage: int) -> dict:
        cfg = self.cfg
        params = dict(self.model.bottleneck_parameters())
        if stage == 1 and cfg.freeze_encoder_stage1:
            # only the quantizer learns; everything upstream keeps its initialization
            return {k: v for k, v in params.items() if k.startswith("codebook.")}
        params.update(self.model.encoder_parameters())
        if stage == 2:
            if self.protos is not None:
                params.update(self.protos.trainable("protos."))
            if self.inverse_head is not None:
                params.update(self.inverse_head.trainable("inverse."))
        return params

    def _epsilon(self, start: int, end: int) -> float:
        cfg = self.cfg
        half = max(1, (end - start) // 2)
        frac = min(1.0, (self.frame - start) / half)
        return cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac

    def target_embed(self, obs) -> np.ndarray:
        x = Tensor(np.asarray(obs, dtype=self.model.dtype))
        z = self.target_predictor(self.target_encoder(x))
        m = self.model
        if m.vib is not None:
            z = vib_deterministic(m.vib, z)
        if m.codebook is not None:
            z = quantize(z, m.codebook, track=False).z_q
        return z.data

    def greedy_action(self, obs) -> int:
        z = self.model.embed(obs).z
        return int(np.argmax(self.q(z).data[0]))

    def _act(self, obs, eps: float) -> int:
        rng = self.rngs["act"]
        if rng.random() < eps:
            return int(rng.integers(N_ACTIONS))
        return self.greedy_action(obs)

    def _soft_updates(self) -> None:
        tau = self.cfg.tau_q
        soft_update(self.q_target, self.q, tau)
        soft_update(self.target_encoder, self.model.encoder, tau)
        soft_update(self.target_predictor, self.model.predictor, tau)

    def _post_codebook(self, embeddings) -> None:
        cb = self.model.codebook
        if cb is None or cb.frozen:
            return
        segs = np.concatenate([e.pre_quant.data for e in embeddings]).reshape(-1, cb.G, cb.d)
        if cb.mode == "ema":
            codes = np.concatenate([e.codes for e in embeddings])
            codebook_update_ema(cb, segs, codes)
        cb.reseed_dead(segs.astype(np.float64), self.rngs["misc"])

    def _maybe_init_codebook(self, obs) -> None:
        cb = self.model.codebook
        if cb is None or cb.calls > 0 or not self.cfg.codebook_data_init or cb.frozen:
            return
        z = self.model.embed(obs, quantized=False).z.data
        cb.init_from_segments(z.reshape(-1, cb.G, cb.d).astype(np.float64), self.rngs["misc"])

    def _log(self, stage: int, eps: float, reward_mean: float = float("nan")) -> None:
        if self.frame % self.cfg.log_every:
            return
        w = self._writer("metrics.csv", METRICS_HEADER)
        cb = self.model.codebook
        perp = float("nan")
        if cb is not None:
            perp = float(np.mean(codebook_stats(cb, window=True).perplexity))
            cb.reset_window()
        cov = float((self.visits > 0).sum()) / len(self.visits)
        row = [stage, self.frame] + [_fmt(self.last.get(k, float("nan"))) for k in
                                     ("loss_total", "loss_objective", "loss_vq", "loss_kl", "loss_q")]
        row += [_fmt(perp), _fmt(eps), _fmt(reward_mean), _fmt(cov)]
        if w is not None:
            w.writerow(row)
        self.last_metrics_row = row

    # ------------------------------------------------------------- env loop
    def _env_step(self, spec: envs.EnvSpec, goal, buffer: ReplayBuffer, action: int,
                  traj_name: str, track_visits: bool, store_reward=None) -> tuple[bool, float]:
        obs = self.current_obs(spec, goal, traj_name, track_visits)
        self.env_state, nxt, reward, done, trunc = envs.step(spec, self.env_state, action)
        if store_reward is not None:
            reward = store_reward(nxt)
        buffer.add(obs, action, reward, nxt, done, done or trunc)
        self.episode_return += reward
        if track_visits:
            r, c = self.env_state.agent
            self.visits[r * spec.layout.width + c] += 1
        w = self._writer(traj_name, envs.TRAJECTORY_HEADER)
        if w is not None:
            w.writerow([self.episode, self.env_state.steps, *self.env_state.agent, action, reward])
        self.frame += 1
        finished = done or trunc
        ret = self.episode_return
        if finished:
            self.episode += 1
            self.env_state = None
        return finished, ret

    def _reset_env(self, spec, goal, traj_name, track_visits) -> None:
        self.env_state, _ = envs.reset(spec, goal, self.rngs["env"] if goal is None else self.rngs["task"])
        self.episode_return = 0.0
        if track_visits:
            r, c = self.env_state.agent
            self.visits[r * spec.layout.width + c] += 1
        w = self._writer(traj_name, envs.TRAJECTORY_HEADER)
        if w is not None:
            w.writerow([self.episode, 0, *self.env_state.agent, -1, 0.0])

    def current_obs(self, spec, goal, traj_name, track_visits):
        if self.env_state is None:
            self._reset_env(spec, goal, traj_name, track_visits)
        return envs.render(self.env_state, spec)

    # -------------------------------------------------------------- stage I
    def stage1(self, until: int | None = None) -> None:
        cfg = self.cfg
        end = cfg.stage1_end if until is None else min(until, cfg.stage1_end)
        if self.stage_done >= 1:
            return
        while self.frame < end:
            self.current_obs(self.pre_spec, None, "trajectory.csv", True)
            action = int(self.rngs["act"].integers(N_ACTIONS))
            self._env_step(self.pre_spec, None, self.explore_buffer, action, "trajectory.csv", True)
            if len(self.explore_buffer) >= max(cfg.seed_frames, 2) and self.frame % cfg.update_every == 0:
                self._update_stage1()
            self._log(1, 1.0)
        if self.frame >= cfg.stage1_end:
            self.stage_done = 1
            self.env_state = None
        self._flush()

    def _update_stage1(self) -> None:
        cfg = self.cfg
        params = self._rep_params(1)
        if not params:
            return
        b = self.explore_buffer.sample(cfg.batch_size, self.rngs["sample"])
        self._maybe_init_codebook(b.obs)
        _, _, both = self._paired_embed(b)
        comps = LossComponents(0.0, both.vq_loss, both.kl)
        loss = self._checked_total(comps)
        opt = self._optimizer("stage1", params)
        if isinstance(loss, Tensor) and loss.requires_grad:
            self._backward(loss)
        opt.step()
        self._post_codebook([both])
        vals = comps.values()
        self.last.update(loss_total=float(loss.data) if isinstance(loss, Tensor) else float(loss),
                         loss_objective=float("nan"), loss_vq=vals["discretization"],
                         loss_kl=vals["gaussian"])

    def _checked_total(self, comps: LossComponents):
        try:
            return total_loss(comps, self.cfg.beta_vib)
        except FloatingPointError as exc:
            self._save_divergence()
            raise DivergenceError(str(exc)) from exc

    def _save_divergence(self) -> None:
        if self.out_dir is not None:
            self.save(self.out_dir / "checkpoint_diverged.bin")

    # ------------------------------------------------------------- stage II
    def stage2(self, until: int | None = None) -> None:
        cfg = self.cfg
        if self.stage_done < 1:
            raise StageOrderError("stage II requires stage I to have completed")
        if self.stage_done >= 2:
            return
        end = cfg.stage2_end if until is None else min(until, cfg.stage2_end)
        collect_reward = None if cfg.reward_relabel else self._collection_reward
        while self.frame < end:
            eps = self._epsilon(cfg.stage1_end, cfg.stage2_end)
            obs = self.current_obs(self.pre_spec, None, "trajectory.csv", True)
            action = self._act(obs, eps)
            self._env_step(self.pre_spec, None, self.explore_buffer, action, "trajectory.csv", True,
                           store_reward=collect_reward)
            rmean = float("nan")
            ready = len(self.explore_buffer) >= max(cfg.seed_frames, cfg.batch_size if cfg.objective != "inverseK" else 2)
            if ready and self.frame % cfg.update_every == 0:
                rmean = self._update_stage2()
            self._log(2, eps, rmean)
        if self.frame >= cfg.stage2_end:
            self.stage_done = 2
            self.env_state = None
        self._flush()

    def _embed_queue(self, obs) -> np.ndarray:
        e = self.model.embed(obs, quantized=self.cfg.queue_quantized)
        return e.z.data.astype(np.float64)

    def _collection_reward(self, next_obs) -> float:
        z = self._embed_queue(next_obs)[0]
        res = intrinsic_reward(z, self.queue, self.cfg.knn_k)
        enqueue(self.queue, z)
        self._trace(np.array([res.reward]), z[None])
        return res.reward

    def _trace(self, rewards: np.ndarray, z: np.ndarray) -> None:
        if not self.cfg.trace_intrinsic:
            return
        w = self._writer("intrinsic.csv", TRACE_HEADER)
        if w is None:
            return
        codes = ""
        cb = self.model.codebook
        if cb is not None and self.cfg.queue_quantized:
            idx, _ = cb.nearest(z[:1].reshape(1, cb.G, cb.d))
            codes = "-".join(str(int(i)) for i in idx[0])
        w.writerow([self.frame, _fmt(rewards.mean()), self.queue.fill, codes])

    def _objective_batch(self):
        cfg = self.cfg
        rng = self.rngs["sample"]
        if cfg.objective != "inverseK":
            return self.explore_buffer.sample(cfg.batch_size, rng), None
        ks = rng.integers(1, cfg.max_k + 1, size=cfg.n_k_samples)
        per = max(1, cfg.batch_size // cfg.n_k_samples)
        parts = []
        weights = []
        for k in ks:
            try:
                parts.append(self.explore_buffer.sample_pairs(per, [int(k)], rng))
            except ReplayError:
                continue  # no episode spans k steps yet
            weights.append(np.full(per, 1.0 / per))
        if not parts:
            parts = [self.explore_buffer.sample_pairs(cfg.batch_size, [1], rng)]
            weights = [np.full(cfg.batch_size, 1.0 / cfg.batch_size)]
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
        batch = Batch(cat("obs"), cat("actions"), cat("rewards"), cat("next_obs"), cat("dones"),
                      cat("ks"), cat("indices"))
        return batch, np.concatenate(weights)

    def _objective_loss(self, es, en, b, weights):
        cfg = self.cfg
        if cfg.objective == "contrastive":
            return contrastive_loss(es.z, en.z, cfg.contrastive_tau)
        if cfg.objective == "proto":
            target = self.protos_target if cfg.proto_ema_target else None
            return proto_loss(es.z, en.z, self.protos, target)
        logits = self.inverse_head(concat([es.z, en.z], axis=1))
        ce = -gather(log_softmax(logits), b.actions)
        if weights is None:
            return ce.mean()
        return (ce * weights.astype(ce.dtype)).sum()

    def _paired_embed(self, b):
        """Stochastic embeddings of obs and next_obs from one stacked forward pass."""
        n = len(b.obs)
        e = self.model.embed(np.concatenate([b.obs, b.next_obs]), self.rngs["vib"], track=True)
        es = Embedding(e.z[:n], e.pre_quant[:n], None, None, None if e.codes is None else e.codes[:n])
        en = Embedding(e.z[n:], e.pre_quant[n:], None, None, None if e.codes is None else e.codes[n:])
        return es, en, e

    def _update_stage2(self) -> float:
        cfg = self.cfg
        b, weights = self._objective_batch()
        self._maybe_init_codebook(b.obs)
        es, en, both = self._paired_embed(b)
        obj = self._objective_loss(es, en, b, weights)
        comps = LossComponents(obj, both.vq_loss, both.kl)
        loss = self._checked_total(comps)
        opt = self._optimizer("stage2_rep", self._rep_params(2))
        self._backward(loss)
        opt.step()
        if self.protos is not None:
            self.protos.normalize()
            if self.protos_target is not None:
                soft_update(self.protos_target, self.protos, cfg.tau_q)
        self._post_codebook([both])

        n = len(b.obs)
        det = self.model.embed(np.concatenate([b.obs, b.next_obs]), quantized=cfg.queue_quantized)
        if cfg.reward_relabel:
            z_next = det.z.data[n:]
            r_int, _ = batch_intrinsic_reward(z_next, self.queue, cfg.knn_k)
            self._trace(r_int, z_next)
            enqueue(self.queue, z_next)
        else:
            r_int = b.rewards
        z_obs = det.z[:n] if cfg.queue_quantized else None
        q_loss = self._q_update("stage2_q", b, r_int, detach_features=True, z=z_obs)
        self._soft_updates()
        vals = comps.values()
        self.last.update(loss_total=float(loss.data), loss_objective=vals["objective"],
                         loss_vq=vals["discretization"], loss_kl=vals["gaussian"], loss_q=q_loss)
        return float(np.mean(r_int))

    def _q_update(self, key: str, b, rewards, detach_features: bool, z: Tensor | None = None) -> float:
        cfg = self.cfg
        anchor = 0.0
        if z is None:
            e = self.model.embed(b.obs)
            z = e.z
            if not detach_features and cfg.stage3_commitment:
                anchor = e.vq_loss  # keeps fine-tuned encoder outputs on the frozen codebook
        params = dict(self.q.trainable("q."))
        if detach_features:
            z = stop_gradient(z)
        else:
            params.update(self.model.encoder_parameters())
        next_q = self.q_target(Tensor(self.target_embed(b.next_obs))).data
        loss = dqn_loss(self.q(z), b.actions, rewards, b.dones, next_q, cfg.gamma)
        if isinstance(anchor, Tensor):
            q_only = float(loss.data)
            loss = loss + anchor
            opt = self._optimizer(key, params)
            self._backward(loss)
            opt.step()
            return q_only
        opt = self._optimizer(key, params)
        self._backward(loss)
        opt.step()
        return float(loss.data)

    # ------------------------------------------------------------ stage III
    def begin_stage3(self) -> None:
        cfg = self.cfg
        if self.stage_done < 2:
            raise StageOrderError("stage III requires stages I and II to have completed")
        if self.model.codebook is not None and self.model.codebook.calls == 0:
            raise StageOrderError("stage III refuses to run with an untrained codebook; "
                                  "pretrain it first or disable the bottleneck (use_vq=false)")
        if "stage3" in self.optimizers:
            return
        if self.model.codebook is not None:
            self.model.codebook.freeze()
        if self.model.vib is not None:
            self.model.vib.requires_grad_(False)
        if cfg.freeze_encoder_stage3:
            self.model.encoder.requires_grad_(False)
            self.model.predictor.requires_grad_(False)
        self.q = QNetwork(cfg, self.rngs["task"])
        self.q_target = frozen_copy(self.q)
        params = dict(self.q.trainable("q."))
        params.update(self.model.encoder_parameters())
        self._optimizer("stage3", params)
        self.env_state = None
        self.evaluate()

    def stage3(self, until: int | None = None) -> None:
        cfg = self.cfg
        self.begin_stage3()
        end = cfg.stage3_end if until is None else min(until, cfg.stage3_end)
        goal = cfg.goal_cells()
        while self.frame < end:
            eps = self._epsilon(cfg.stage2_end, cfg.stage3_end)
            obs = self.current_obs(self.task_spec, goal, "trajectory_finetune.csv", False)
            action = self._act(obs, eps)
            finished, ret = self._env_step(self.task_spec, goal, self.task_buffer, action,
                                           "trajectory_finetune.csv", False)
            if finished:
                self.finetune_returns.append(ret)
            if len(self.task_buffer) >= max(cfg.seed_frames, 2):
                b = self.task_buffer.sample(cfg.batch_size, self.rngs["sample"])
                self.last["loss_q"] = self._q_update("stage3", b, b.rewards, detach_features=False)
                self._soft_updates()
            self._log(3, eps)
            if (self.frame - cfg.stage2_end) % cfg.eval_every == 0 or self.frame == cfg.stage3_end:
                self.evaluate()
        if self.frame >= cfg.stage3_end:
            self.stage_done = 3
        self._flush()

    def evaluate(self, starts=None) -> list[float]:
        """Greedy episodes toward the center goal; one row per start cell."""
        spec = self.task_spec
        layout = spec.layout
        if starts is None:
            n = layout.height - 1
            starts = [(0, 0), (0, n), (n, 0), (n, n)]
        rng = np.random.default_rng([self.cfg.seed, self.frame, 7])
        w = self._writer("eval.csv", EVAL_HEADER)
        returns = []
        for start in starts:
            state, _ = envs.reset(spec, "center", rng)
            state = replace(state, agent=tuple(start))
            total = 0.0
            while not (state.done or state.truncated):
                action = self.greedy_action(envs.render(state, spec))
                state, _, reward, _, _ = envs.step(spec, state, action)
                total += reward
            row = [self.frame, start[0], start[1], _fmt(total), state.steps, int(state.done)]
            self.eval_rows.append(row)
            if w is not None:
                w.writerow(row)
            returns.append(total)
        return returns

    def final_eval(self) -> list[list]:
        last = max((r[0] for r in self.eval_rows), default=None)
        return [r for r in self.eval_rows if r[0] == last]

    def run_all(self) -> None:
        self.stage1()
        self.stage2()
        self.stage3()

    def coverage(self) -> float:
        return float((self.visits > 0).sum()) / len(self.visits)

    # -------------------------------------------------------- persistence
    def _modules(self) -> dict:
        mods = {"model": self.model, "target_encoder": self.target_encoder,
                "target_predictor": self.target_predictor, "q": self.q, "q_target": self.q_target}
        if self.protos is not None:
            mods["protos"] = self.protos
            mods["protos_target"] = self.protos_target
        if self.inverse_head is not None:
            mods["inverse"] = self.inverse_head
        return mods

    def save(self, path) -> None:
        arrays: dict[str, np.ndarray] = {}
        for name, mod in self._modules().items():
            for k, v in mod.state_dict().items():
                arrays[f"{name}/{k}"] = v
        if self.model.codebook is not None:
            for k, v in self.model.codebook.buffers().items():
                arrays[f"codebook/{k}"] = v
        for key, opt in self.optimizers.items():
            for k, v in opt.state_dict().items():
                arrays[f"opt/{key}/{k}"] = v
        for k, v in self.queue.state().items():
            arrays[f"queue/{k}"] = v
        for name, buf in (("explore", self.explore_buffer), ("task", self.task_buffer)):
            for k, v in buf.state().items():
                arrays[f"{name}/{k}"] = v
        arrays["visits"] = self.visits
        self._flush()
        meta = {
            "config": self.cfg.to_dict(),
            "log_sizes": self._log_sizes(),
            "frame": self.frame,
            "stage_done": self.stage_done,
            "episode": self.episode,
            "episode_return": self.episode_return,
            "env_state": _state_to_json(self.env_state),
            "rngs": {k: r.bit_generator.state for k, r in self.rngs.items()},
            "optimizers": {k: sorted(o.params) for k, o in self.optimizers.items()},
            "last": self.last,
            "eval_rows": self.eval_rows,
            "finetune_returns": self.finetune_returns,
            "frozen": {
                "codebook": bool(self.model.codebook is not None and self.model.codebook.frozen),
                "vib": bool(self.model.vib is not None and not any(p.requires_grad for p in self.model.vib.parameters())),
                "encoder": not any(p.requires_grad for p in self.model.encoder.parameters()),
            },
        }
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path, out_dir=None, cfg: RunConfig | None = None) -> "Trainer":
        arrays, meta = load_checkpoint(path)
        if meta is None:
            raise ValueError(f"{path}: checkpoint has no metadata")
        if cfg is None:
            cfg = RunConfig.from_dict(meta["config"])
        trainer = cls(cfg, out_dir)
        trainer._restore(arrays, meta)
        return trainer

    def _restore(self, arrays: dict, meta: dict) -> None:
        self._truncate_logs(meta.get("log_sizes", {}))
        frozen = meta["frozen"]
        if frozen["codebook"] and self.model.codebook is not None:
            self.model.codebook.freeze()
        if frozen["vib"] and self.model.vib is not None:
            self.model.vib.requires_grad_(False)
        if frozen["encoder"]:
            self.model.encoder.requires_grad_(False)
            self.model.predictor.requires_grad_(False)
        for name, mod in self._modules().items():
            prefix = f"{name}/"
            mod.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        if self.model.codebook is not None:
            self.model.codebook.load_buffers({k[9:]: v for k, v in arrays.items() if k.startswith("codebook/")})
        self.queue.load_state({k[6:]: v for k, v in arrays.items() if k.startswith("queue/")})
        for name, buf in (("explore", self.explore_buffer), ("task", self.task_buffer)):
            p = f"{name}/"
            buf.load_state({k[len(p):]: v for k, v in arrays.items() if k.startswith(p)})
        self.visits = arrays["visits"].astype(np.int64)
        self.frame = meta["frame"]
        self.stage_done = meta["stage_done"]
        self.episode = meta["episode"]
        self.episode_return = meta["episode_return"]
        self.env_state = _state_from_json(meta["env_state"])
        for k, state in meta["rngs"].items():
            self.rngs[k].bit_generator.state = state
        self.last = meta["last"]
        self.eval_rows = meta["eval_rows"]
        self.finetune_returns = meta["finetune_returns"]
        name_map = self._optimizer_param_map()
        for key, names in meta["optimizers"].items():
            params = {n: name_map[n] for n in names}
            opt = Adam(params, lr=self.cfg.lr)
            p = f"opt/{key}/"
            opt.load_state_dict({k[len(p):]: v for k, v in arrays.items() if k.startswith(p)})
            self.optimizers[key] = opt

    def _optimizer_param_map(self) -> dict:
        out = {}
        out.update({f"encoder.{k}": p for k, p in self.model.encoder.named_parameters()})
        out.update({f"predictor.{k}": p for k, p in self.model.predictor.named_parameters()})
        if self.model.vib is not None:
            out.update({f"vib.{k}": p for k, p in self.model.vib.named_parameters()})
        if self.model.codebook is not None:
            out.update({f"codebook.{k}": p for k, p in self.model.codebook.named_parameters()})
        out.update({f"q.{k}": p for k, p in self.q.named_parameters()})
        if self.protos is not None:
            out.update({f"protos.{k}": p for k, p in self.protos.named_parameters()})
        if self.inverse_head is not None:
            out.update({f"inverse.{k}": p for k, p in self.inverse_head.named_parameters()})
        return out
