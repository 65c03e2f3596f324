import os
from pathlib import Path
from dotenv import load_dotenv

env_path = Path(__file__).parent.parent / '.env'
load_dotenv(env_path)


def _env_flag(name: str, default: str = 'false') -> bool:
    return os.getenv(name, default).lower() == 'true'


class Config:
    LOG_LEVEL = os.getenv('CDNET_LOG_LEVEL', 'INFO').upper()
    LOG_FILE = os.getenv('CDNET_LOG_FILE') or None
    NUM_THREADS = int(os.getenv('CDNET_NUM_THREADS', '0')) or None
    PROGRESS = _env_flag('CDNET_PROGRESS')
