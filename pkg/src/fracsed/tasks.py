"""Generic classification and episodic few-shot tasks.

A task knows how to cut its training data into batches, how to turn a batch
into the accuracy loss, and how to score a network with the evaluation
protocol: repeated random subsets of the validation split (generic) or
repeated N-way K-shot episodes on it (few-shot). Round ``r`` of an evaluation
with master seed ``s`` draws from ``default_rng([s, r])``, so rounds are
independent of each other and of evaluation order.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class InsufficientDataError(ValueError):
    pass


# --------------------------------------------------------------------------
# episodes
# --------------------------------------------------------------------------

@dataclass
class Episode:
    classes: np.ndarray        # global labels of the N ways, in way order
    support_idx: np.ndarray    # [N*K] dataset indices, way-major
    query_idx: np.ndarray      # [N*Q] dataset indices, way-major
    n_way: int
    k_shot: int
    n_query: int

    @property
    def support_labels(self):
        return np.repeat(np.arange(self.n_way), self.k_shot)

    @property
    def query_labels(self):
        return np.repeat(np.arange(self.n_way), self.n_query)

    @property
    def items(self):
        """Support then query indices: the row order ``prototypical_loss`` expects."""
        return np.concatenate([self.support_idx, self.query_idx])


def sample_episode(labels, n_way=12, k_shot=5, n_query=5, rng=None, overlap=False):
    """Pick ``n_way`` classes, then ``k_shot`` support and ``n_query`` query items each.

    Sampling is uniform and without replacement at both levels. ``overlap``
    reuses the support items as queries (test harness only; needs
    ``n_query == k_shot``).
    """
    rng = np.random.default_rng() if rng is None else rng
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    need = k_shot if overlap else k_shot + n_query
    if overlap and n_query != k_shot:
        raise ValueError("overlap mode needs n_query == k_shot")
    eligible = classes[counts >= need]
    if len(classes) < n_way:
        raise InsufficientDataError(f"{n_way}-way episode needs {n_way} classes, have {len(classes)}")
    if len(eligible) < n_way:
        raise InsufficientDataError(f"only {len(eligible)} classes have >= {need} samples")
    chosen = rng.choice(eligible, size=n_way, replace=False)
    support, query = [], []
    for c in chosen:
        members = np.flatnonzero(labels == c)
        pick = rng.choice(members, size=need, replace=False)
        support.append(pick[:k_shot])
        query.append(pick[:k_shot] if overlap else pick[k_shot:])
    return Episode(chosen, np.concatenate(support), np.concatenate(query), n_way, k_shot, n_query)


def _prototype_matrix(n_way, k_shot):
    a = np.zeros((n_way, n_way * k_shot))
    for c in range(n_way):
        a[c, c * k_shot:(c + 1) * k_shot] = 1.0 / k_shot
    return a


def prototypical_loss(embeddings, episode):
    """Cross-entropy of queries against negative squared distances to class means."""
    n_s = episode.n_way * episode.k_shot
    n_q = episode.n_way * episode.n_query
    if embeddings.ndim != 2 or embeddings.shape[0] != n_s + n_q:
        raise ValueError(f"embeddings {embeddings.shape} do not match an episode of "
                         f"{n_s} support + {n_q} query items")
    support = ad.take_rows(embeddings, np.arange(n_s))
    query = ad.take_rows(embeddings, np.arange(n_s, n_s + n_q))
    protos = ad.matmul(ad.Tensor(_prototype_matrix(episode.n_way, episode.k_shot)), support)
    logits = ad.scale(ad.squared_distances(query, protos), -1.0)
    return ad.softmax_cross_entropy(logits, episode.query_labels)


def nearest_prototype_predict(support_emb, support_labels, query_emb, n_way):
    protos = np.stack([support_emb[support_labels == c].mean(axis=0) for c in range(n_way)])
    d = ((query_emb[:, None, :] - protos[None]) ** 2).sum(axis=-1)
    return np.argmin(d, axis=1)


# --------------------------------------------------------------------------
# evaluation protocols
# --------------------------------------------------------------------------

def predict_outputs(net, x, chunk=256):
    """Eval-mode network outputs as a numpy array."""
    net.training = False
    outs = [net.forward(x[i:i + chunk]).data for i in range(0, len(x), chunk)]
    return np.concatenate(outs, axis=0)


def evaluate_generic(predictions, labels, rounds=100, samples_per_round=60, seed=0):
    """Mean and std of top-1 accuracy over random validation subsets.

    ``predictions`` are class indices (or logits, reduced by argmax).
    """
    predictions = np.asarray(predictions)
    if predictions.ndim == 2:
        predictions = predictions.argmax(axis=1)
    labels = np.asarray(labels)
    if len(labels) < samples_per_round:
        raise InsufficientDataError(
            f"validation set has {len(labels)} samples, need {samples_per_round}")
    correct = predictions == labels
    accs = np.empty(rounds)
    for r in range(rounds):
        pick = np.random.default_rng([seed, r]).choice(len(labels), samples_per_round, replace=False)
        accs[r] = correct[pick].mean()
    return float(accs.mean()), float(accs.std())


def evaluate_fewshot(embeddings, labels, rounds=100, n_way=12, k_shot=5, n_query=5, seed=0,
                     overlap=False):
    """Mean and std of nearest-prototype query accuracy over random episodes."""
    embeddings = np.asarray(embeddings)
    labels = np.asarray(labels)
    accs = np.empty(rounds)
    for r in range(rounds):
        ep = sample_episode(labels, n_way, k_shot, n_query, np.random.default_rng([seed, r]), overlap)
        pred = nearest_prototype_predict(embeddings[ep.support_idx], ep.support_labels,
                                         embeddings[ep.query_idx], n_way)
        accs[r] = np.mean(pred == ep.query_labels)
    return float(accs.mean()), float(accs.std())


# --------------------------------------------------------------------------
# tasks
# --------------------------------------------------------------------------

class GenericTask:
    kind = "generic"

    def __init__(self, dataset, batch_size=32, eval_rounds=100, eval_samples=60):
        self.dataset = dataset
        self.batch_size = batch_size
        self.eval_rounds = eval_rounds
        self.eval_samples = eval_samples
        self.x_train, self.y_train = dataset.split("train")
        self.x_val, self.y_val = dataset.split("val")

    def batches(self, rng):
        order = rng.permutation(len(self.y_train))
        for i in range(0, len(order), self.batch_size):
            idx = order[i:i + self.batch_size]
            yield self.x_train[idx], self.y_train[idx]

    def loss(self, net, batch):
        x, y = batch
        return ad.softmax_cross_entropy(net.forward(x), y)

    def evaluate(self, net, seed=0):
        return evaluate_generic(predict_outputs(net, self.x_val), self.y_val,
                                self.eval_rounds, self.eval_samples, seed)


class FewShotTask:
    kind = "fewshot"

    def __init__(self, dataset, n_way=12, k_shot=5, n_query=5, episodes_per_epoch=20,
                 eval_rounds=100):
        self.dataset = dataset
        self.n_way = n_way
        self.k_shot = k_shot
        self.n_query = n_query
        self.episodes_per_epoch = episodes_per_epoch
        self.eval_rounds = eval_rounds
        self.x_train, self.y_train = dataset.split("train")
        self.x_val, self.y_val = dataset.split("val")

    def batches(self, rng):
        for _ in range(self.episodes_per_epoch):
            ep = sample_episode(self.y_train, self.n_way, self.k_shot, self.n_query, rng)
            yield ep

    def loss(self, net, episode):
        return prototypical_loss(net.forward(self.x_train[episode.items]), episode)

    def evaluate(self, net, seed=0):
        return evaluate_fewshot(predict_outputs(net, self.x_val), self.y_val, self.eval_rounds,
                                self.n_way, self.k_shot, self.n_query, seed)


def batch_inputs(task, batch):
    if isinstance(batch, Episode):
        return task.x_train[batch.items]
    return batch[0]


def make_task(kind, dataset, **kwargs):
    if kind == "generic":
        return GenericTask(dataset, **kwargs)
    if kind == "fewshot":
        return FewShotTask(dataset, **kwargs)
    raise ValueError(f"unknown task {kind!r}")


def train_float(net, task, epochs, lr=0.05, momentum=0.9, seed=0):
    """Plain float training; returns per-epoch ``{epoch, loss, accuracy}``."""
    from .fracbits import run_epoch

    net.set_mode("float")
    rng = np.random.default_rng(seed)
    opt = ad.SGD(net.weight_params(), lr, momentum)
    history = []
    for epoch in range(epochs):
        loss = run_epoch(net, task, rng, opt, epoch)
        history.append({"phase": "float", "epoch": epoch, "loss": loss,
                        "accuracy": task.evaluate(net, seed=seed)[0]})
    return history
