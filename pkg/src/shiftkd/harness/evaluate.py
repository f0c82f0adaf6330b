"""Top-1 accuracy per domain, with exact counting."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from ..augment import AugmentConfig, stack_eval
from ..core import DataError, DatasetManifest, Domain, Split
from ..encoders import load_image


@dataclass
class EvalResult:
    accuracy: float
    correct: int
    n_eval: int
    per_class_accuracy: list[Optional[float]]
    per_class_counts: list[int]
    confusion: list[list[int]]  # confusion[true][pred]
    domain: Optional[str] = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def top1(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class id
    return np.argmax(np.asarray(logits), axis=1)


def evaluate_predictions(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int,
                         domain: Optional[str] = None, **metadata) -> EvalResult:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise DataError("cannot evaluate on an empty test set")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    counts = conf.sum(axis=1)
    diag = np.diag(conf)
    correct = int(diag.sum())
    per_class = [float(diag[c] / counts[c]) if counts[c] else None for c in range(n_classes)]
    return EvalResult(correct / y_true.size, correct, int(y_true.size), per_class,
                      counts.tolist(), conf.tolist(), domain, dict(metadata))


def predict_logits(model: torch.nn.Module, pixels: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(pixels), batch_size):
            out.append(model(torch.from_numpy(pixels[i:i + batch_size])).numpy())
    return np.concatenate(out) if out else np.zeros((0, 0))


def held_out_records(m: DatasetManifest, domain: Optional[Domain]):
    return [r for r in m.records
            if m.split_of(r.record_id) is Split.TEST and (domain is None or r.domain is domain)]


def evaluate(model: torch.nn.Module, test_manifest: DatasetManifest, domain: Optional[Domain] = None,
             cfg: Optional[AugmentConfig] = None, **metadata) -> EvalResult:
    cfg = cfg or AugmentConfig()
    recs = held_out_records(test_manifest, domain)
    if not recs:
        raise DataError(f"no TEST records for domain {domain.value if domain else 'any'}")
    pixels = stack_eval([load_image(r.uri) for r in recs], cfg)
    pred = top1(predict_logits(model, pixels))
    return evaluate_predictions([r.class_id for r in recs], pred, test_manifest.n_classes,
                                domain.value if domain else None, **metadata)


def evaluate_embeddings(head: torch.nn.Module, vectors: np.ndarray, labels: Sequence[int], n_classes: int,
                        domain: Optional[str] = None, **metadata) -> EvalResult:
    """Accuracy of a linear probe on precomputed encoder outputs."""
    head.eval()
    with torch.no_grad():
        logits = head(torch.as_tensor(np.asarray(vectors), dtype=torch.float32)).numpy()
    return evaluate_predictions(labels, top1(logits), n_classes, domain, **metadata)
