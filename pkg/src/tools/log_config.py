import os
import time
import logging
from dotenv import load_dotenv

# 状态图标
SUCCESS_ICON = "✓"
ERROR_ICON = "✗"
WAIT_ICON = "⟳"

# 获取项目根目录
project_root = os.path.dirname(os.path.dirname(
    os.path.dirname(os.path.abspath(__file__))))
env_path = os.path.join(project_root, '.env')

# .env 是可选的，只提供日志目录和级别
if os.path.exists(env_path):
    load_dotenv(env_path, override=False)

_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def get_log_dir() -> str:
    """日志目录，可由 QTL_LOG_DIR 覆盖"""
    return os.getenv("QTL_LOG_DIR", os.path.join(project_root, 'logs'))


def setup_logger(name: str, level: str = None) -> logging.Logger:
    """创建带控制台和文件处理器的日志记录器（重复调用不会叠加处理器）"""
    logger = logging.getLogger(name)
    level_name = (level or os.getenv("QTL_LOG_LEVEL", "INFO")).upper()
    logger.setLevel(getattr(logging, level_name, logging.INFO))
    logger.propagate = False
    if logger.handlers:
        return logger

    formatter = logging.Formatter(_FORMAT)

    # 控制台输出走 stderr，stdout 留给 --json 等机器可读输出
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    # 设置文件处理器
    log_dir = get_log_dir()
    try:
        os.makedirs(log_dir, exist_ok=True)
        log_file = os.path.join(log_dir, f'qtl_{time.strftime("%Y%m%d")}.log')
        file_handler = logging.FileHandler(log_file, encoding='utf-8', mode='a')
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
    except OSError as e:
        logger.warning(f"{ERROR_ICON} 无法创建日志文件: {e}")

    return logger
