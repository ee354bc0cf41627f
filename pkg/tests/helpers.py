# -*- coding: utf-8 -*-
"""测试用的小工具：SEA 输出拼装与脚本化网关"""
from fairrag.llm_gateway import LLMGateway, ScriptedBackend, ScriptedRule


def sea_text(sufficient: bool, gaps: str = "None") -> str:
    return (
        "1. Mission Deconstruction:\n"
        "- **Main Goal:** answer the question.\n"
        "- **Required Findings:** A: first fact; B: second fact\n\n"
        "2. Intelligence Synthesis & Analysis:\n"
        "- **Confirmed Findings:** A: found.\n"
        f"- **Remaining Gaps:** {gaps}\n\n"
        "3. Final Assessment:\n"
        "- **Conclusion:** done.\n"
        f"- **Sufficient:** {'Yes' if sufficient else 'No'}"
    )


def scripted_gateway(rules, **kwargs) -> LLMGateway:
    """rules: ScriptedRule 或 (match, response) 元组"""
    rules = [rule if isinstance(rule, ScriptedRule) else ScriptedRule(*rule) for rule in rules]
    return LLMGateway(backend=ScriptedBackend(rules), **kwargs)
