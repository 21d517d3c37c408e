from .checkpoint import VERSION, Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from .config import RunConfig, load_config, parse_config_text
from .train import LoadedRun, Trainer, load_run, read_metrics
