from .core import RecordLog, TrainingLog
from .model import LANMSFF, LANMSFFConfig, audit_parameters, build_model
from .serialization import load_weights, save_weights
from .training import TrainConfig, fit
