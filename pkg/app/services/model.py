"""
Black-box model handle.

The attack works ordinal-side; the handle encodes each batch into the
representation its backend expects and checks the probability contract
on the way back, so every backend looks the same to the optimizer.
"""

import logging
from enum import Enum
from typing import List, Sequence, Union

import numpy as np

from app.errors import BackendError, ModelError
from app.models.schema import FeatureSchema
from app.services.external_model import ExternalModel, validate_probabilities
from app.services.forest import ForestModel
from app.services.tabular import onehot_matrix, onehot_width

logger = logging.getLogger(__name__)


class Backend(str, Enum):
    BUILTIN_FOREST = "builtin_forest"
    EXTERNAL_PROCESS = "external_process"


class Encoding(str, Enum):
    ONEHOT = "onehot"
    ORDINAL = "ordinal"


class ModelHandle:
    """Uniform ``predict_proba`` over ordinal-side instances."""

    def __init__(
        self,
        predictor: Union[ForestModel, ExternalModel],
        features: Sequence[FeatureSchema],
        backend: Backend,
        encoding: Encoding,
        n_classes: int,
    ) -> None:
        self.predictor = predictor
        self.features: List[FeatureSchema] = list(features)
        self.backend = backend
        self.encoding = encoding
        self.n_classes = n_classes

    @classmethod
    def from_forest(cls, forest: ForestModel, features: Sequence[FeatureSchema]) -> "ModelHandle":
        width = onehot_width(features)
        if forest.feature_width != width:
            raise ModelError(
                f"model expects {forest.feature_width} one-hot columns but the schema encodes to {width}"
            )
        return cls(forest, features, Backend.BUILTIN_FOREST, Encoding.ONEHOT, forest.n_classes)

    @classmethod
    def from_external(cls, external: ExternalModel, features: Sequence[FeatureSchema]) -> "ModelHandle":
        schema = external.schema or external.handshake()
        encoding = Encoding(schema.encoding)
        expected = onehot_width(features) if encoding is Encoding.ONEHOT else len(features)
        if schema.n_features != expected:
            raise ModelError(
                f"external model expects {schema.n_features} {encoding.value} features, schema gives {expected}"
            )
        return cls(external, features, Backend.EXTERNAL_PROCESS, encoding, schema.n_classes)

    def encode(self, batch: np.ndarray) -> np.ndarray:
        batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        if self.encoding is Encoding.ONEHOT:
            return onehot_matrix(batch, self.features)
        return batch

    def predict_proba(self, batch: np.ndarray) -> np.ndarray:
        """
        Class probabilities for a non-empty batch of ordinal-side instances.

        Raises:
            BackendError: the backend failed or broke the probability contract.
        """
        batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        if batch.shape[0] == 0:
            raise ValueError("predict_proba needs a non-empty batch")
        probs = self.predictor.predict_proba(self.encode(batch))
        if self.backend is Backend.BUILTIN_FOREST:
            try:
                probs = validate_probabilities(probs, batch.shape[0], self.n_classes)
            except BackendError as exc:
                raise BackendError(f"forest broke the probability contract: {exc}") from exc
        return probs

    def predict_class(self, batch: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(batch), axis=1)

    def close(self) -> None:
        if isinstance(self.predictor, ExternalModel):
            self.predictor.close()


def predict_proba(handle: ModelHandle, batch: np.ndarray) -> np.ndarray:
    return handle.predict_proba(batch)


def external_predict(handle: ModelHandle, batch: np.ndarray) -> np.ndarray:
    """``predict_proba`` restricted to external backends."""
    if handle.backend is not Backend.EXTERNAL_PROCESS:
        raise BackendError("external_predict called on a built-in model")
    return handle.predict_proba(batch)
