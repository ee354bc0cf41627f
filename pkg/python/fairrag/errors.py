# -*- coding: utf-8 -*-
"""
fairrag 异常层级

所有模块抛出的异常都继承自 FairRagError，CLI 据此决定退出码。
"""
from typing import Optional


class FairRagError(Exception):
    """fairrag 异常基类"""


class ConfigError(FairRagError):
    """配置文件或命令行参数非法"""


class CorpusError(FairRagError):
    """语料 JSONL 读取/校验失败"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class IndexBuildError(FairRagError):
    """索引构建失败（例如重复的 chunk id）"""


class IndexFormatError(FairRagError):
    """索引目录缺文件或版本不匹配"""


class DimensionMismatchError(FairRagError):
    """向量维度与索引声明的维度不一致"""


class GatewayError(FairRagError):
    """LLM 网关错误基类"""


class TransportError(GatewayError):
    """HTTP/传输层失败（重试耗尽后抛出）"""


class ScriptedRuleMiss(GatewayError):
    """脚本后端没有任何规则匹配当前 prompt"""

    def __init__(self, prompt: str):
        self.prompt_head = prompt[:80]
        super().__init__(f"no scripted rule matches prompt: {self.prompt_head!r}")


class ParseError(FairRagError):
    """agent 输出无法解析，携带原始文本"""

    def __init__(self, agent: str, message: str, raw: str):
        self.agent = agent
        self.raw = raw
        super().__init__(f"[{agent}] {message}")


class JudgeParseError(ParseError):
    """评测 judge 的 JSON 输出非法或枚举越界"""


class EmbeddingError(FairRagError):
    """向量提供方调用失败"""


class TemplateError(FairRagError):
    """prompt 模板缺失或渲染时缺少占位符绑定"""
