"""The three training phases and the data preparation in front of them.

1. ``train_supernet``: thresholds prune rows while a fresh dimension mask is
   sampled for every mini-batch; the best validation epoch supplies ``m_e*``.
2. ``run_search``: evolutionary search for ``m_d*`` on the frozen supernet.
3. ``retrain``: fresh weights trained under both masks held fixed.
"""
import copy
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, kernels
from .config import RunConfig
from .data import SynthSpec, build_schema, encode, load_csv, split, synth_generate
from .metrics import auc, logloss, remaining_params, sparsity
from .model import CTRModel, EmbeddingTable, apply_masks, full_dims
from .nn import AdamState, adam_step, adam_step_rows, bce_loss, make_rng
from .prune import ThresholdVector, gen_embedding_mask, sparse_reg
from .search import SearchParams, SupernetEvaluator, evolutionary_search

log = logging.getLogger(__name__)

# independent RNG streams under one run seed
STREAM_INIT, STREAM_SHUFFLE, STREAM_DIMS, STREAM_SEARCH = 1, 2, 3, 4


class TrainingDiverged(RuntimeError):
    pass


class PhaseError(RuntimeError):
    pass


def synth_spec(config):
    return SynthSpec(n_fields=config["synth.n_fields"], cardinalities=config["synth.cardinalities"],
                     n_informative_fields=config["synth.n_informative"],
                     n_rows=config["synth.n_rows"], noise_level=config["synth.noise_level"],
                     zipf_exponent=config["synth.zipf_exponent"], signal=config["synth.signal"],
                     bias=config["synth.bias"])


def load_raw(config, base_dir=None):
    """``base_dir`` anchors a relative ``data.path`` (the config file's folder)."""
    if config["data.source"] == "synth":
        return synth_generate(synth_spec(config), seed=config["seed"])
    path = config["data.path"]
    if base_dir is not None and not os.path.isabs(path):
        path = os.path.join(base_dir, path)
    return load_csv(path, config["data.numeric_fields"],
                    config["data.delimiter"], config["discretize.log_base"])


@dataclass
class Prepared:
    schema: object
    data: object  # full encoded dataset
    train: object
    val: object
    test: object


def prepare(config, raw=None, base_dir=None):
    raw = load_raw(config, base_dir) if raw is None else raw
    schema = build_schema(raw, config["data.min_count"])
    data = encode(raw, schema)
    train, val, test = split(data, config["split.ratios"], config["seed"])
    return Prepared(schema, data, train, val, test)


@dataclass
class TrainedModel:
    """Weights plus the masks they were trained or selected under."""
    kind: str  # supernet | final | baseline
    E: np.ndarray
    params: dict
    buffers: dict
    m_e: np.ndarray
    dims: np.ndarray
    t: np.ndarray = None
    epoch: int = 0
    val_auc: float = float("nan")
    history: list = field(default_factory=list)  # per epoch: {"auc", "logloss", ...}
    history_masks: list = field(default_factory=list)  # supernet only: m_e per epoch
    rng_state: dict = field(default_factory=dict)
    config_text: str = ""

    def build_model(self, config):
        n = len(self.dims)
        model = CTRModel(n, self.E.shape[1], config["model.mlp"], config["model.batchnorm"])
        model.load_state(self.params, self.buffers)
        return model

    def masked_table(self, schema, dims=None):
        dims = self.dims if dims is None else dims
        return apply_masks(self.E, self.m_e, dims, schema)

    def save(self, path):
        tensors = {"E": self.E, "m_e": self.m_e, "dims": self.dims}
        tensors.update({f"param.{k}": v for k, v in self.params.items()})
        tensors.update({f"buffer.{k}": v for k, v in self.buffers.items()})
        if self.t is not None:
            tensors["t"] = self.t
        for i, m in enumerate(self.history_masks):
            tensors[f"history.m_e.{i:04d}"] = m
        meta = {"kind": self.kind, "epoch": self.epoch, "val_auc": self.val_auc,
                "history": self.history, "rng_state": self.rng_state,
                "n_history_masks": len(self.history_masks)}
        checkpoint.save(path, self.config_text, meta, tensors)

    @classmethod
    def load(cls, path):
        config_text, meta, tensors = checkpoint.load(path)
        params = {k[6:]: v for k, v in tensors.items() if k.startswith("param.")}
        buffers = {k[7:]: v for k, v in tensors.items() if k.startswith("buffer.")}
        masks = [tensors[f"history.m_e.{i:04d}"] for i in range(meta["n_history_masks"])]
        return cls(meta["kind"], tensors["E"], params, buffers, tensors["m_e"], tensors["dims"],
                   tensors.get("t"), meta["epoch"], meta["val_auc"], meta["history"], masks,
                   meta["rng_state"], config_text)


def _adam_for(params, config):
    return {k: AdamState.like(v, lr=config["train.lr"], weight_decay=config["train.l2"])
            for k, v in params.items()}


def evaluate(model, table, ds, dims=None, batch_size=4096):
    probs = model.predict(table, ds.idx, dims, batch_size=batch_size)
    return auc(ds.labels, probs), logloss(ds.labels, probs)


def _batches(n_rows, batch_size, rng):
    order = rng.permutation(n_rows)
    # a trailing batch of one row cannot be batch-normalised
    for s in range(0, n_rows, batch_size):
        chunk = order[s:s + batch_size]
        if len(chunk) >= 2:
            yield chunk


def _fit(train, val, schema, config, mode, m_e_fixed=None, dims_fixed=None, on_epoch=None):
    """Shared training loop. ``mode`` is ``supernet`` (thresholds + sampled
    dimension masks) or ``fixed`` (both masks frozen)."""
    seed = config["seed"]
    D = config["model.dim"]
    n = schema.n_fields
    init_rng = make_rng(seed, STREAM_INIT)
    shuffle_rng = make_rng(seed, STREAM_SHUFFLE)
    dims_rng = make_rng(seed, STREAM_DIMS)
    table = EmbeddingTable.create(schema.total, D, init_rng, lr=config["train.lr"],
                                  weight_decay=config["train.l2"])
    model = CTRModel(n, D, config["model.mlp"], config["model.batchnorm"], init_rng)
    params = model.parameters()
    adam = _adam_for(params, config)
    row_fields = schema.row_fields()
    supernet = mode == "supernet"
    thr = ThresholdVector.create(n, config["prune.lr_t"], config["prune.t_init"]) if supernet else None
    alpha = config["prune.alpha"]
    if not supernet:
        m_e_fixed = np.asarray(m_e_fixed, dtype=np.int64)
        dims_fixed = np.asarray(dims_fixed, dtype=np.int64)
        if m_e_fixed.shape != (schema.total,) or dims_fixed.shape != (n,):
            raise PhaseError("mask shapes do not match the schema")
        if dims_fixed.min() < 1 or dims_fixed.max() > D:
            raise PhaseError(f"dimension mask entries must lie in [1, {D}]")
    full = full_dims(n, D)
    E = table.E

    best = None
    history, history_masks = [], []
    stale = 0
    for epoch in range(config["train.max_epochs"]):
        for batch in _batches(len(train), config["train.batch_size"], shuffle_rng):
            idx = train.idx[batch]
            y = train.labels[batch]
            rows, inv = np.unique(idx, return_inverse=True)
            inv = inv.reshape(idx.shape)
            E_u = E[rows]
            if supernet:
                gap = kernels.l1_norms(E_u) - thr.t[row_fields[rows]]
                keep = (gap > 0).astype(np.float64)
                dims = dims_rng.integers(1, D + 1, size=n, dtype=np.int64)
            else:
                keep = (m_e_fixed[rows] != 0).astype(np.float64)
                dims = dims_fixed
            local = np.where(keep[:, None] != 0, E_u, 0.0)
            prob = model.forward(local, inv, dims, train=True)
            loss, dprob = bce_loss(y, prob)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"{mode}: loss became {loss} in epoch {epoch}")
            row_grads, grads = model.backward(dprob)
            # every local row is touched, so row_grads.rows == arange(len(rows))
            d_hat = row_grads.values
            if supernet:
                dE, dt = kernels.masked_embed_grads(d_hat, E_u, keep, gap, row_fields[rows], n)
                dt += alpha * sparse_reg(thr.t)[1]
                adam_step(thr.t, dt, thr.adam)
            else:
                dE = d_hat * keep[:, None]
            adam_step_rows(E, rows, dE, table.adam)
            for name, p in params.items():
                adam_step(p, grads[name], adam[name])

        m_e = gen_embedding_mask(E, thr.t, schema) if supernet else m_e_fixed
        eval_dims = full if supernet else dims_fixed
        masked = apply_masks(E, m_e, eval_dims, schema)
        v_auc, v_loss = evaluate(model, masked, val, eval_dims)
        rec = {"phase": mode if supernet else "retrain", "epoch": epoch, "auc": v_auc, "logloss": v_loss,
               "sparsity": sparsity(m_e, eval_dims, schema, D), "kept_rows": int((m_e != 0).sum()),
               "mean_dim": float(np.mean(eval_dims))}
        if supernet:
            rec["thresholds"] = [float(x) for x in thr.t]
        history.append(rec)
        if supernet:
            history_masks.append(np.asarray(m_e, dtype=np.int64).copy())
        log.info("%s epoch %d: val auc %.5f logloss %.5f kept %d", mode, epoch, v_auc, v_loss, rec["kept_rows"])
        if on_epoch is not None:
            on_epoch(rec)
        if best is None or v_auc > best["auc"]:
            best = {"auc": v_auc, "epoch": epoch, "E": E.copy(),
                    "params": {k: v.copy() for k, v in params.items()},
                    "buffers": {k: v.copy() for k, v in model.buffers().items()},
                    "m_e": np.asarray(m_e, dtype=np.int64).copy(),
                    "t": thr.t.copy() if supernet else None}
            stale = 0
        else:
            stale += 1
            if stale >= config["train.patience"]:
                break

    rng_state = {"shuffle": shuffle_rng.bit_generator.state, "dims": dims_rng.bit_generator.state}
    return TrainedModel(
        kind="supernet" if supernet else "final", E=best["E"], params=best["params"],
        buffers=best["buffers"], m_e=best["m_e"],
        dims=full if supernet else dims_fixed.copy(), t=best["t"], epoch=best["epoch"],
        val_auc=best["auc"], history=history, history_masks=history_masks,
        rng_state=copy.deepcopy(rng_state), config_text=config.canonical())


def train_supernet(train, val, schema, config, on_epoch=None):
    """Supernet training with simultaneous row pruning.

    The returned model holds the weights of the best validation epoch; its
    ``m_e`` is that epoch's embedding mask (``m_e*``).
    """
    return _fit(train, val, schema, config, "supernet", on_epoch=on_epoch)


def retrain(train, val, schema, m_e, dims, config, on_epoch=None, kind="final"):
    """Train from fresh weights with both masks frozen."""
    out = _fit(train, val, schema, config, "fixed", m_e, dims, on_epoch=on_epoch)
    out.kind = kind
    return out


def train_baseline(train, val, schema, config, on_epoch=None):
    """Full-table reference: ``retrain`` with identity masks."""
    D = config["model.dim"]
    return retrain(train, val, schema, np.ones(schema.total, dtype=np.int64),
                   full_dims(schema.n_fields, D), config, on_epoch, kind="baseline")


def search_params(config):
    return SearchParams(n_mutation=config["search.n_mutation"], n_crossover=config["search.n_crossover"],
                        iterations=config["search.iterations"], prob=config["search.prob"],
                        topk=config["search.topk"])


def run_search(supernet, val, schema, config):
    if supernet is None or supernet.kind != "supernet":
        raise PhaseError("dimension search requires supernet checkpoint")
    model = supernet.build_model(config)
    evaluator = SupernetEvaluator(model, supernet.E, supernet.m_e, schema, val,
                                  batch_size=config["search.eval_batch"])
    rng = make_rng(config["seed"], STREAM_SEARCH)
    return evolutionary_search(evaluator, schema.n_fields, config["model.dim"], search_params(config), rng)


@dataclass
class PipelineResult:
    prepared: Prepared
    supernet: TrainedModel
    search: object
    final: TrainedModel
    baseline: TrainedModel = None
    inherited_val_auc: float = float("nan")


def run_all(config, raw=None, baseline=True):
    """prepare -> supernet -> search -> retrain (+ baseline) in memory."""
    prep = prepare(config, raw)
    sup = train_supernet(prep.train, prep.val, prep.schema, config)
    res = run_search(sup, prep.val, prep.schema, config)
    dims = np.asarray(res.best.dims, dtype=np.int64)
    final = retrain(prep.train, prep.val, prep.schema, sup.m_e, dims, config)
    base = train_baseline(prep.train, prep.val, prep.schema, config) if baseline else None
    return PipelineResult(prep, sup, res, final, base, res.best.fitness)


def summary_row(name, trained, schema, ds, config, dims=None):
    """Metrics of a trained model on ``ds`` under its own masks."""
    dims = trained.dims if dims is None else np.asarray(dims, dtype=np.int64)
    model = trained.build_model(config)
    table = trained.masked_table(schema, dims)
    a, l = evaluate(model, table, ds, dims)
    D = trained.E.shape[1]
    return {"model": name, "auc": a, "logloss": l, "sparsity": sparsity(trained.m_e, dims, schema, D),
            "kept_rows": int((trained.m_e != 0).sum()), "mean_dim": float(np.mean(dims)),
            "remaining_params": remaining_params(trained.m_e, dims, schema)}


__all__ = ["RunConfig", "prepare", "train_supernet", "retrain", "train_baseline", "run_search",
           "run_all", "TrainedModel", "PhaseError", "TrainingDiverged", "summary_row"]
