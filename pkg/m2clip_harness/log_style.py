import logging
import re
from typing import Optional


# ANSI color/style constants with minimalist design principles
class Style:
    BLUE = "\033[38;5;68m"
    GREEN = "\033[38;5;71m"
    YELLOW = "\033[38;5;179m"
    RED = "\033[38;5;167m"
    GRAY = "\033[38;5;246m"
    CYAN = "\033[38;5;109m"

    BOLD = "\033[1m"
    RESET = "\033[0m"

    DEBUG_ICON = "•"
    INFO_ICON = "→"
    WARNING_ICON = "!"
    ERROR_ICON = "×"
    CRITICAL_ICON = "‼"
    STEP_ICON = "⤷"


LOG_LEVELS = {
    "DEBUG": (Style.GRAY, Style.DEBUG_ICON),
    "INFO": (Style.BLUE, Style.INFO_ICON),
    "WARNING": (Style.YELLOW, Style.WARNING_ICON),
    "ERROR": (Style.RED, Style.ERROR_ICON),
    "CRITICAL": (Style.RED + Style.BOLD, Style.CRITICAL_ICON),
}

ANSI_ESCAPE = re.compile(r"\x1B\[[0-?]*[ -/]*[@-~]")

LOG_FORMAT = "%(asctime)s  %(levelname)s  %(name)s  %(message)s"
DATE_FORMAT = "%H:%M:%S"

# Third-party loggers kept above DEBUG chatter
QUIET_LOGGERS = {
    "asyncio": logging.WARNING,
    "dotenv": logging.WARNING,
}


def strip_ansi(text: str) -> str:
    return ANSI_ESCAPE.sub("", text)


class SwissDesignFormatter(logging.Formatter):
    """Custom log formatter with minimalist design principles"""

    def formatTime(self, record, datefmt=None):
        asctime = super().formatTime(record, datefmt)
        return f"{Style.GRAY}{asctime}{Style.RESET}"

    def format(self, record):
        # Work on a copy so file handlers sharing the record stay plain
        record = logging.makeLogRecord(record.__dict__)
        original_name = record.name
        if "." in original_name:
            record.name = original_name.split(".")[0]

        if record.levelname in LOG_LEVELS:
            color, icon = LOG_LEVELS[record.levelname]
            record.levelname = f"{color}{icon}{Style.RESET}"

        record.name = f"{Style.GRAY}{record.name:<14}{Style.RESET}"

        if record.levelno == logging.INFO:
            if isinstance(record.msg, str):
                msg = record.msg
                if original_name == "test":
                    if msg.startswith("Starting"):
                        record.msg = f"{Style.GREEN}{msg}{Style.RESET}"
                    elif "passed" in msg or "reached" in msg:
                        record.msg = f"{Style.GREEN}{Style.BOLD}✓ {msg}{Style.RESET}"
                    else:
                        record.msg = f"{Style.BLUE}{msg}{Style.RESET}"
                elif msg.startswith("[EPOCH "):
                    record.msg = f"{Style.CYAN}{msg}{Style.RESET}"
                elif msg.startswith("[EVAL "):
                    record.msg = f"{Style.GREEN}✓{Style.RESET} {msg}"
            return f"{self.formatTime(record, self.datefmt)}  {record.levelname}  {record.name}  {record.getMessage()}"

        if isinstance(record.msg, str) and record.msg.startswith("[STEP "):
            record.msg = f"{Style.CYAN}{Style.STEP_ICON} {Style.RESET} {record.msg}"

        formatted = super().format(record)
        if record.levelno >= logging.WARNING:
            separator = f"\n{Style.GRAY}{'─' * 80}{Style.RESET}\n"
            formatted = f"{separator}{formatted}\n"
        return formatted


def configure_logging(level: str = "INFO", log_file: Optional[str] = None) -> logging.Logger:
    """Install the colour console handler and an optional plain file handler on the root logger.

    Loggers named in ``QUIET_LOGGERS`` are raised to their listed level.

    Args:
        level: Root level name (DEBUG, INFO, WARNING, ...)
        log_file: Path of an ANSI-free log file, if any

    Returns:
        The configured root logger
    """
    handler = logging.StreamHandler()
    handler.setFormatter(SwissDesignFormatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT))
    handlers = [handler]

    if log_file:
        file_handler = logging.FileHandler(log_file, mode="w", encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT))
        handlers.append(file_handler)

    root_logger = logging.getLogger()
    root_logger.handlers = handlers
    root_logger.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    for name, quiet_level in QUIET_LOGGERS.items():
        logging.getLogger(name).setLevel(quiet_level)

    return root_logger
