import datetime as dt
import json
import logging
import logging.config
import os
try:
    from typing import override
except ImportError:  # Python < 3.12
    try:
        from typing_extensions import override
    except ImportError:
        def override(func):
            return func

logger = logging.getLogger("lora_logger")

EXTRA_ATTRIBUTES = ["msg_type", "cell_id", "experiment", "method", "rank", "seed", "status", "mse",
                    "condition", "block", "layer", "learning_rate", "weight_decay", "iteration"]


class MyJSONFormatter(logging.Formatter):
    def __init__(self, fmt_keys: dict):
        self.fmt_keys = fmt_keys if fmt_keys is not None else {}
        super().__init__()

    @override
    def format(self, record: logging.LogRecord):
        message = self._prepare_log_dict(record)
        return json.dumps(message, default=str)

    def _prepare_log_dict(self, record: logging.LogRecord):
        always_include = {
            "message": record.getMessage(),
            "timestamp": dt.datetime.fromtimestamp(record.created, tz=dt.timezone.utc).isoformat(),
        }

        message = {}
        for key, val in self.fmt_keys.items():
            if val in always_include:
                message[key] = always_include.pop(val)
            else:
                message[key] = getattr(record, val)

        for attr in EXTRA_ATTRIBUTES:
            if hasattr(record, attr) and attr not in message:
                message[attr] = getattr(record, attr)

        message.update(always_include)
        return message


# Filter classes for directing logs to the right handlers
class CellFilter(logging.Filter):
    """Only per-cell result records"""
    def filter(self, record):
        return getattr(record, "msg_type", None) == "cell"


class TrainingFilter(logging.Filter):
    """Only grid-search and pretraining progress"""
    def filter(self, record):
        return getattr(record, "msg_type", None) == "training"


class SystemMessageFilter(logging.Filter):
    """Only records with msg_type = 'system'"""
    def filter(self, record):
        return getattr(record, "msg_type", None) == "system"


def setup_logging(log_directory: str = "logs"):
    """Applies config/log.json with every file handler redirected into log_directory.

    Args:
        log_directory: Directory where log files should be written. Defaults to 'logs'.
    """
    os.makedirs(log_directory, exist_ok=True)

    # Drop handlers from a previous run so each run gets its own files
    for handler in logger.handlers[:]:
        handler.close()
        logger.removeHandler(handler)

    config_path = os.path.join(os.path.dirname(os.path.dirname(__file__)), 'config', 'log.json')
    if not os.path.exists(config_path):
        logging.basicConfig(level=logging.INFO)
        logger.warning(f"Logging config not found at {config_path}. Using basic configuration.")
        return

    with open(config_path, 'r') as f:
        config = json.load(f)
    for handler_config in config.get('handlers', {}).values():
        if 'filename' in handler_config:
            handler_config['filename'] = os.path.join(log_directory, os.path.basename(handler_config['filename']))
    config['incremental'] = False
    logging.config.dictConfig(config)
