"""静态配置：版本号与模拟设计的默认网格"""

VERSION = "1.0.0"

# 模拟设计
DESIGN_THETA0 = (1.0, 1.6, 1.25, 0.7)
DESIGN_INTERCEPT = 5.0
DESIGN_COVARIATE_BOX = (1.0, 2.0)
DESIGN_DEATH_WEIBULL = (10.0, 1.09)  # (形状, 尺度)
DESIGN_CENSORING_SHAPE = 4.0

# 权重测度支撑 {0.1, …, 1.2} 及候选格点
DEFAULT_WEIGHT_SUPPORT = "0.1:0.1:1.2"
DEFAULT_LATTICE_POINTS = (0.9, 1.0, 1.1, 1.2)
DEFAULT_LATTICE_LEVELS = (0.25, 0.5, 0.75, 1.0)

DEFAULT_BANDWIDTH = 0.2
DEFAULT_H_GRID = "0.05:0.05:0.3"
DEFAULT_DOMAIN = (0.0, 3.0)


def get_version() -> str:
    return VERSION
