"""A general dialog agent."""
from agentscope.agents import AgentBase
from agentscope.message import Msg


class DialogAgent(AgentBase):
    """A simple agent that replies with its model, keeping a memory of the dialog."""

    def __init__(self, name: str, sys_prompt: str, model_config_name: str) -> None:
        super().__init__(name=name, sys_prompt=sys_prompt, model_config_name=model_config_name)

    def reply(self, x: Msg = None) -> Msg:
        if x is not None:
            self.memory.add(x)
        prompt = self.model.format(Msg("system", self.sys_prompt, role="system"), self.memory.get_memory())
        response = self.model(prompt)
        msg = Msg(self.name, response.text, role="assistant")
        self.memory.add(msg)
        return msg
