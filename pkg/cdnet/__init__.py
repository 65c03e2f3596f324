import logging

import torch

from cdnet.config import Config
from cdnet.utils.logs import setup_logging

logger = logging.getLogger(__name__)


def configure(log_level=None, log_file=None):
    """Apply process settings: logging and torch thread count"""
    setup_logging((log_level or Config.LOG_LEVEL).upper(), log_file or Config.LOG_FILE)
    if Config.NUM_THREADS:
        torch.set_num_threads(Config.NUM_THREADS)
        logger.debug(f"torch intra-op threads set to {Config.NUM_THREADS}")


def create_cli():
    from cdnet.commands import cli
    return cli
