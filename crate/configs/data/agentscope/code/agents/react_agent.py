"""An agent that reasons and acts with tools in a loop."""
from agentscope.agents import AgentBase
from agentscope.service import ServiceToolkit


class ReActAgent(AgentBase):
    """Alternates between reasoning and tool calls until it can answer.

    The toolkit describes the available service functions to the model, and
    max_iters bounds the number of reasoning-acting rounds.
    """

    def __init__(self, name: str, model_config_name: str, service_toolkit: ServiceToolkit, max_iters: int = 10) -> None:
        super().__init__(name=name, model_config_name=model_config_name)
        self.service_toolkit = service_toolkit
        self.max_iters = max_iters
