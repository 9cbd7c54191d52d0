from typing import Any, Dict, Optional


class TryOnError(Exception):
    """
    Base error for the try-on pipeline.

    Carries a machine-readable code plus the optional field / stage that failed,
    so the CLI and the API can emit structured error records.
    """

    code: str = "tryon_error"

    def __init__(self, message: str, *, field: Optional[str] = None, stage: Optional[str] = None, **details: Any):
        super().__init__(message)
        self.message = message
        self.field = field
        self.stage = stage
        self.details = details

    def to_record(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {"error": self.code, "message": self.message}
        if self.field is not None:
            record["field"] = self.field
        if self.stage is not None:
            record["stage"] = self.stage
        if self.details:
            record["details"] = {k: str(v) for k, v in self.details.items()}
        return record


class PoseParseError(TryOnError, ValueError):
    code = "pose_parse_error"


class DomainError(TryOnError, ValueError):
    code = "domain_error"


class ContractError(TryOnError, ValueError):
    code = "contract_error"


class SingularSystemError(TryOnError, ArithmeticError):
    code = "singular_system"


class NoCandidatesError(TryOnError, LookupError):
    code = "no_candidates"


class NoGarmentRegionError(TryOnError, ValueError):
    code = "no_garment_region"


class NoSkinReferenceError(TryOnError, ValueError):
    code = "no_skin_reference"


class TrainingStepError(TryOnError, RuntimeError):
    code = "training_step_error"


class CheckpointError(TryOnError, IOError):
    code = "checkpoint_error"


class ConfigError(TryOnError, ValueError):
    code = "config_error"


class ManifestError(TryOnError, ValueError):
    code = "manifest_error"


class StageError(TryOnError, RuntimeError):
    code = "stage_error"
