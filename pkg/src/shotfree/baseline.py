"""Prototypical-network baseline.

Episodes are split into support and query sets; each class prototype is the
mean of its support embeddings and the loss is the cross-entropy of the
queries under ``softmax(-|q - c|^2)``.  Embeddings are the raw MLP outputs
(no normalization, no scale), and the training shot is a fixed
hyperparameter of the model.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import PROTONET, Checkpoint
from .data import Split, SplitDataset, sample_episode_support_query
from .embedding import init_embedding, mlp_forward
from .errors import ContractError, DegenerateInputError, DivergenceError, NonFiniteError
from .fewshot import EvalReport, Scenario, evaluate
from .optim import lr_schedule, make_optimizer
from .training import TrainConfig, TrainLog, _streams, validate_checkpoint


def protonet_episode_loss(features: Tensor, episode) -> tuple:
    """Query cross-entropy of one split episode; ``features`` covers ``episode.indices()`` in order.

    Returns ``(loss, accuracy)``.
    """
    ways = episode.ways
    sizes = [len(ix) for ix in episode.sample_indices]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    sup_rows, qry_rows, qry_lab = [], [], []
    avg = []
    for k in range(ways):
        lo, n_s = offsets[k], episode.support_count[k]
        avg.append((len(sup_rows), n_s))
        sup_rows.extend(range(lo, lo + n_s))
        qry = range(lo + n_s, offsets[k + 1])
        qry_rows.extend(qry)
        qry_lab.extend([k] * len(qry))
    averager = np.zeros((ways, len(sup_rows)))
    for k, (start, n_s) in enumerate(avg):
        averager[k, start:start + n_s] = 1.0 / n_s
    support = ad.take_rows(features, np.array(sup_rows))
    queries = ad.take_rows(features, np.array(qry_rows))
    protos = ad.matmul(Tensor(averager), support)
    logp = ad.log_softmax_rows(ad.neg(ad.sq_dists(queries, protos)))
    y = np.array(qry_lab)
    loss = ad.neg(ad.mean(ad.pick(logp, y)))
    acc = float(np.mean(np.argmax(logp.values, axis=1) == y))
    return loss, acc


def protonet_baseline_train(ds: SplitDataset, cfg: TrainConfig):
    """Meta-train the baseline with ``cfg.shots`` support and ``cfg.queries`` query rows per class.

    Uses the same MLP, optimizer recipe, schedule and validation-based model
    selection as :func:`~shotfree.training.meta_train`; dropout, the metric
    map and the prototype table are not part of this model.
    """
    cfg.validate()
    if not ds.classes(Split.BASE):
        raise ContractError("dataset has no BASE classes to meta-train on")
    s_emb, _, _, s_run = _streams(cfg.seed, 4)
    emb = init_embedding((ds.input_dim,) + cfg.hidden + (cfg.embed_dim,), s_emb, dropout_rate=0.0)
    emb.scale.requires_grad = False
    params = [p for p in emb.parameters() if p.requires_grad]
    opt = make_optimizer(cfg.recipe, params, cfg.resolved_lr)
    rng = np.random.default_rng(s_run)
    trainlog = TrainLog()
    history = []
    best = None

    def snapshot(iteration, score):
        return Checkpoint(PROTONET, emb.copy(), None, None, cfg.to_dict(), iteration, score, cfg.seed)

    for it in range(cfg.max_iterations):
        lr = lr_schedule(cfg.recipe, it, history, cfg.resolved_lr, cfg.resolved_decay_every, cfg.resolved_patience)
        episodes = [sample_episode_support_query(ds, Split.BASE, cfg.ways, cfg.shots, cfg.queries, rng)
                    for _ in range(cfg.episodes_per_iteration)]
        opt.zero_grad()
        try:
            with ad.Tape():
                idx = np.concatenate([ep.indices() for ep in episodes])
                feats = mlp_forward(emb, ds.features[idx])
                total, start = None, 0
                for ep in episodes:
                    n = len(ep.indices())
                    loss_e, _ = protonet_episode_loss(ad.take_rows(feats, np.arange(start, start + n)), ep)
                    start += n
                    total = loss_e if total is None else ad.add(total, loss_e)
                loss = ad.scale(total, Tensor(1.0 / len(episodes)))
                ad.backward(loss)
        except (NonFiniteError, DegenerateInputError) as exc:
            raise DivergenceError(f"baseline diverged at iteration {it} (lr={lr:g}): {exc}", it, lr) from exc
        opt.step(lr)
        row = dict(iteration=it + 1, loss=loss.item(), cross_entropy=loss.item(), entropy=None, near_uniform=None,
                   lr=lr, scale=None, val_accuracy=None)
        if (it + 1) % cfg.validation_interval == 0 or it + 1 == cfg.max_iterations:
            ck = snapshot(it + 1, None)
            score = validate_checkpoint(ck, ds, cfg)
            if score is not None:
                row["val_accuracy"] = score
                history.append((it + 1, score))
                if best is None or score > best.validation_score:
                    ck.validation_score = score
                    best = ck
        trainlog.append(**row)

    if best is None:
        best = snapshot(cfg.max_iterations, None)
    return best.frozen(), trainlog


def protonet_baseline_eval(ck: Checkpoint, ds: SplitDataset, scenario: Scenario | None = None, seed: int = 0,
                           workers: int = 1) -> EvalReport:
    """Same harness as :func:`~shotfree.fewshot.evaluate`, with support-mean prototypes."""
    if ck.method != PROTONET:
        raise ContractError("not a prototypical-network checkpoint")
    return evaluate(ck, ds, scenario, method=PROTONET, seed=seed, workers=workers)
