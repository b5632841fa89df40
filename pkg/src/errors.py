"""
Exception types shared by every module.
"""


class QtlError(Exception):
    """工具包所有异常的基类"""


class ConfigError(QtlError, ValueError):
    """参数、预设名或配置值非法"""


class ShapeError(QtlError, ValueError):
    """张量或层的形状对不上"""


class TapeError(QtlError):
    """反向传播拿到的 tape 不属于当前这次前向"""


class DatasetError(QtlError):
    """数据集读取、组装或缓存失败"""


class CheckpointError(QtlError):
    """检查点文件损坏、截断或版本不兼容"""


class TransferContractError(QtlError):
    """混合模型的特征提取部分没有冻结"""
