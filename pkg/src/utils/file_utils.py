import os
import re
import sys
import logging
from datetime import datetime

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def create_folder(path: str) -> str:
    if not os.path.exists(path):
        os.makedirs(path)
    return path


def sanitize_filename(filename: str) -> str:
    # Remove invalid characters
    filename = re.sub(r'[<>:"/\\|?*]', '', filename)
    # Remove control characters
    filename = "".join(char for char in filename if ord(char) >= 32)
    return filename.strip()


def ledger_line(**fields) -> str:
    """METHOD: hjb | RUN: 3 | SEED: ... in the order given"""
    return " | ".join(f"{key.upper()}: {value}" for key, value in fields.items())


def log_message(log_file: str, message: str) -> None:
    timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
    log_line = f"[{timestamp}] {message}\n"

    try:
        with open(log_file, 'a', encoding='utf-8', errors='replace') as f:
            f.write(log_line)
    except Exception as e:
        logging.error(f"Failed to write to log file {log_file}: {str(e)}")


def setup_logging(log_folder: str, level: str = "INFO") -> None:
    create_folder(log_folder)

    for stream in (sys.stdout, sys.stderr):
        if hasattr(stream, "reconfigure"):
            stream.reconfigure(encoding='utf-8', errors='replace')

    numeric = getattr(logging, str(level).upper(), None)
    if not isinstance(numeric, int):
        raise ValueError(f"unknown log level '{level}'")

    logging.basicConfig(
        level=numeric,
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(os.path.join(log_folder, 'app.log'), encoding='utf-8'),
            logging.StreamHandler(sys.stdout)
        ],
        force=True,
    )
