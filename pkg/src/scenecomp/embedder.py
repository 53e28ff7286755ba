"""Textual scene-graph embeddings for nodes, edges and attributes."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .scenegraph import N_MAX, SceneGraph, Vocabulary, VocabularyError
from .tensorcore import MLP, Module, Rng, Tensor, parameter, stable_hash

TEXT_DIM = 32
CATEGORY_DIM = 32
BOX_DIM = 16
ATTR_ROW_DIM = 16
NODE_DIM = CATEGORY_DIM + TEXT_DIM + BOX_DIM  # 80
EDGE_DIM = CATEGORY_DIM + TEXT_DIM  # 64
ATTR_DIM = ATTR_ROW_DIM + TEXT_DIM  # 48


class PseudoTextEncoder:
    """Fixed unit vector per string: stable hash -> RNG stream -> normalize.

    Stands in for a frozen text encoder; anything with the same
    ``__call__(str) -> ndarray`` signature can replace it.
    """

    def __init__(self, dim: int = TEXT_DIM):
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, text: str) -> np.ndarray:
        vec = self._cache.get(text)
        if vec is None:
            v = Rng(stable_hash(text)).split("text").normal((self.dim,))
            vec = v / np.linalg.norm(v)
            vec.setflags(write=False)
            self._cache[text] = vec
        return vec

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.stack([self(t) for t in texts])


class GraphBatch:
    """Several scene graphs flattened into one disjoint union.

    Node rows are numbered graph by graph; ``triples`` carry global node
    indices and ``edge_index`` into the flattened edge list.
    """

    def __init__(self, graphs: Sequence[SceneGraph], vocab: Vocabulary):
        self.graphs = list(graphs)
        self.vocab = vocab
        cat_idx = {c: i for i, c in enumerate(vocab.categories)}
        pred_idx = {p: i for i, p in enumerate(vocab.predicates)}
        self.sizes = [g.n_objects for g in self.graphs]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(np.intp)
        self.n_nodes = int(self.offsets[-1])
        self.node_graph = np.repeat(np.arange(len(self.graphs)), self.sizes)
        self.node_slot = np.concatenate([np.arange(n) for n in self.sizes]) if self.graphs else np.zeros(0, int)
        self.categories: list[str] = []
        subj, obj, preds, texts = [], [], [], []
        for gi, g in enumerate(self.graphs):
            idx = g.index()
            off = int(self.offsets[gi])
            for n in g.nodes:
                if n.category not in cat_idx:
                    raise VocabularyError(f"unknown category {n.category!r}")
                self.categories.append(n.category)
            for e in g.edges:
                if e.predicate not in pred_idx:
                    raise VocabularyError(f"unknown predicate {e.predicate!r}")
                subj.append(off + idx[e.subject])
                obj.append(off + idx[e.object])
                preds.append(pred_idx[e.predicate])
                s_cat, o_cat = g.nodes[idx[e.subject]].category, g.nodes[idx[e.object]].category
                texts.append(f"{s_cat} {e.predicate} {o_cat}")
        self.category_index = np.array([cat_idx[c] for c in self.categories], dtype=np.intp)
        self.subjects = np.array(subj, dtype=np.intp)
        self.objects = np.array(obj, dtype=np.intp)
        self.predicate_index = np.array(preds, dtype=np.intp)
        self.edge_texts = texts
        self.n_edges = len(texts)

    def __len__(self) -> int:
        return len(self.graphs)

    def triples(self) -> list[tuple[int, int, int]]:
        return [(int(s), k, int(o)) for k, (s, o) in enumerate(zip(self.subjects, self.objects))]

    def boxes(self) -> np.ndarray:
        rows = [b for g in self.graphs for b in g.boxes()]
        return np.array(rows, dtype=np.float64).reshape(-1, 4)

    def slot_placement(self, n_max: int = N_MAX) -> tuple[np.ndarray, np.ndarray]:
        """Matrix scattering node rows into (graph, slot) rows, plus the padding indicator."""
        place = np.zeros((len(self.graphs) * n_max, self.n_nodes))
        place[self.node_graph * n_max + self.node_slot, np.arange(self.n_nodes)] = 1.0
        pad = 1.0 - place.sum(axis=1, keepdims=True)
        return place, pad


class Embedder(Module):
    def __init__(self, vocab: Vocabulary, rng: Rng, text_encoder: Callable[[str], np.ndarray] | None = None):
        self._vocab = vocab
        self._text = text_encoder or PseudoTextEncoder()
        self._attr_index = {a: i for i, a in enumerate(vocab.attributes)}
        self.category_table = parameter(rng.split("cat").normal((len(vocab.categories), CATEGORY_DIM)) * 0.5)
        self.predicate_table = parameter(rng.split("pred").normal((len(vocab.predicates), CATEGORY_DIM)) * 0.5)
        self.attribute_table = parameter(rng.split("attr").normal((max(1, len(vocab.attributes)), ATTR_ROW_DIM)) * 0.5)
        self.attribute_null = parameter(rng.split("attr_null").normal((ATTR_DIM,)) * 0.5)
        self.box_encoder = MLP([4, 32, BOX_DIM], rng.split("box"))

    @property
    def text_encoder(self):
        return self._text

    def batch(self, graphs: Sequence[SceneGraph] | SceneGraph) -> GraphBatch:
        if isinstance(graphs, SceneGraph):
            graphs = [graphs]
        return GraphBatch(graphs, self._vocab)

    def node_base(self, gb: GraphBatch) -> Tensor:
        """Category row concatenated with the category text vector, (N, 64)."""
        rows = tc.take(self.category_table, gb.category_index)
        return tc.concat([rows, Tensor(self._text.encode(gb.categories).reshape(-1, TEXT_DIM))], axis=1)

    def object_text(self, gb: GraphBatch) -> np.ndarray:
        return self._text.encode(gb.categories).reshape(-1, TEXT_DIM)

    def embed_nodes(self, gb: GraphBatch, use_boxes: bool) -> Tensor:
        base = self.node_base(gb)
        if use_boxes:
            box = self.box_encoder(Tensor(gb.boxes()))
        else:
            box = Tensor(np.zeros((gb.n_nodes, BOX_DIM)))
        return tc.concat([base, box], axis=1)

    def embed_edges(self, gb: GraphBatch) -> Tensor:
        rows = tc.take(self.predicate_table, gb.predicate_index)
        text = Tensor(self._text.encode(gb.edge_texts).reshape(-1, TEXT_DIM))
        return tc.concat([rows, text], axis=1)

    def embed_attributes(self, gb: GraphBatch, n_max: int = N_MAX) -> Tensor:
        """(B, n_max, 48): mean attribute row + joined-attribute text, else the null row."""
        B = len(gb)
        avg = np.zeros((B * n_max, self.attribute_table.shape[0]))
        text = np.zeros((B * n_max, TEXT_DIM))
        has = np.zeros((B * n_max, 1))
        for gi, g in enumerate(gb.graphs):
            for slot, node in enumerate(g.nodes):
                if not node.attributes:
                    continue
                r = gi * n_max + slot
                for a in node.attributes:
                    if a not in self._attr_index:
                        raise VocabularyError(f"unknown attribute {a!r}")
                    avg[r, self._attr_index[a]] += 1.0 / len(node.attributes)
                text[r] = self._text(" ".join(node.attributes))
                has[r] = 1.0
        vec = tc.concat([tc.matmul(Tensor(avg), self.attribute_table), Tensor(text)], axis=1)
        out = vec * has + tc.mul(self.attribute_null.reshape(1, ATTR_DIM), Tensor(1.0 - has))
        return out.reshape(B, n_max, ATTR_DIM)
