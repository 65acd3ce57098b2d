"""
Run configuration models for JSON validation
"""

from enum import Enum
from pathlib import Path
from typing import Annotated, Any, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Discriminator, Field, Tag, field_validator, model_validator

from app.config import Config
from app.core.split_model import ExchangeUnit


class Strategy(str, Enum):
    """Federated training strategy, including the FedCME ablations"""
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    FEDRS = "fedrs"
    FEDCME = "fedcme"
    FEDCME_OL = "fedcme-ol"    # alignment only
    FEDCME_OE = "fedcme-oe"    # exchange only
    FEDCME_MTO = "fedcme-mto"  # many-to-one matching
    FEDCME_WM = "fedcme-wm"    # whole-model exchange
    FEDCME_FE = "fedcme-fe"    # extractor exchange

    @property
    def is_fedcme(self) -> bool:
        return self.value.startswith("fedcme")


class ClientConfig(BaseModel):
    """Local training settings shared by every client of a run"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr: float = Field(0.01, gt=0, description="Learning rate")
    local_epochs: int = Field(6, ge=1, description="Local epochs E")
    batch_size: int = Field(32, ge=1, description="Mini-batch size B")
    strategy: Strategy = Field(Strategy.FEDAVG)
    mu: float = Field(0.01, ge=0, description="Feature-alignment factor (FedCME)")
    mu_prox: float = Field(0.01, ge=0, description="Proximal factor (FedProx)")
    alpha_rs: float = Field(0.5, gt=0, le=1, description="Restricted-softmax factor (FedRS)")
    exchange_enabled: bool = Field(True, description="Swap models with the counterpart mid-training")
    alignment_enabled: bool = Field(True, description="Apply the feature-alignment loss")
    exchange_unit: ExchangeUnit = Field(ExchangeUnit.CLASSIFIER)
    many_to_one: bool = Field(False, description="Every client adopts its most dissimilar peer's unit")
    eval_fraction: float = Field(0.2, gt=0, lt=1, description="Self-evaluation subset fraction")


class BlobsSpec(BaseModel):
    """Synthetic Gaussian blobs"""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["blobs"] = "blobs"
    num_classes: int = Field(10, ge=2)
    dim: int = Field(20, ge=2)
    n_per_class: int = Field(200, ge=1)
    spread: float = Field(1.0, ge=0)
    center_scale: Optional[float] = Field(None, gt=0, description="Defaults to 2 * spread * num_classes^(2/dim)")


class IdxSpec(BaseModel):
    """IDX image/label files (FMNIST layout)"""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["idx"] = "idx"
    images: str
    labels: str
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    num_classes: int = Field(10, ge=2)

    @model_validator(mode="after")
    def check_test_pair(self):
        if (self.test_images is None) != (self.test_labels is None):
            raise ValueError("test_images and test_labels must be given together")
        return self


def dataset_kind(value: Any) -> Optional[str]:
    """Dataset tag; a mapping without "kind" describes blobs"""
    if isinstance(value, dict):
        return value.get("kind", "blobs")
    return getattr(value, "kind", None)


DatasetSpec = Annotated[
    Union[Annotated[BlobsSpec, Tag("blobs")], Annotated[IdxSpec, Tag("idx")]],
    Discriminator(dataset_kind),
]


class RunConfig(BaseModel):
    """One simulation run; keys follow the K/M/T notation of the protocol"""
    model_config = ConfigDict(extra="forbid")

    strategy: Strategy = Strategy.FEDAVG
    k: int = Field(10, ge=1, description="Number of clients")
    m: int = Field(4, ge=1, description="Clients selected per round")
    t: int = Field(10, ge=1, description="Global rounds")
    local_epochs: int = Field(6, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(0.01, gt=0)
    mu: float = Field(0.01, ge=0)
    mu_prox: float = Field(0.01, ge=0)
    alpha_rs: float = Field(0.5, gt=0, le=1)
    dirichlet_alpha: float = Field(0.5, gt=0)
    dataset: DatasetSpec = Field(default_factory=BlobsSpec)
    seed: int = Field(0, ge=0)
    eval_fraction: float = Field(0.2, gt=0, lt=1)
    test_fraction: float = Field(0.2, gt=0, lt=1)
    hidden_dims: List[int] = Field(default_factory=lambda: [64, 32], min_length=1)
    literal_weighting: bool = Field(False, description="Weight by D_k over the global sample count instead of the selected total")
    output_path: Optional[str] = None

    @field_validator("m")
    @classmethod
    def m_within_k(cls, v, info):
        k = info.data.get("k")
        if k is not None and v > k:
            raise ValueError(f"m={v} exceeds k={k}")
        return v

    @field_validator("hidden_dims")
    @classmethod
    def positive_widths(cls, v):
        if any(width < 1 for width in v):
            raise ValueError("every hidden width must be at least 1")
        return v

    def client_config(self) -> ClientConfig:
        unit = {
            Strategy.FEDCME_WM: ExchangeUnit.WHOLE,
            Strategy.FEDCME_FE: ExchangeUnit.EXTRACTOR,
        }.get(self.strategy, ExchangeUnit.CLASSIFIER)
        return ClientConfig(
            lr=self.lr,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            strategy=self.strategy,
            mu=self.mu,
            mu_prox=self.mu_prox,
            alpha_rs=self.alpha_rs,
            exchange_enabled=self.strategy.is_fedcme and self.strategy != Strategy.FEDCME_OL,
            alignment_enabled=self.strategy != Strategy.FEDCME_OE,
            exchange_unit=unit,
            many_to_one=self.strategy == Strategy.FEDCME_MTO,
            eval_fraction=self.eval_fraction,
        )

    def resolved_output_path(self) -> Path:
        """Relative or missing paths land under FEDSIM_OUTPUT_DIR"""
        if self.output_path is None:
            return Path(Config.OUTPUT_DIR) / f"{self.strategy.value}_seed{self.seed}.csv"
        path = Path(self.output_path)
        return path if path.is_absolute() else Path(Config.OUTPUT_DIR) / path
