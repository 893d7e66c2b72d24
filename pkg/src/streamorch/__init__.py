"""Tagged message streams, registry-backed planners and a constraint-enforcing
coordinator, run on a deterministic simulated clock."""

from .agents import AgentInstance, AgentRuntime, OutputEntry, ProcessorOutput, should_trigger
from .coordinator import (
    Action,
    CoordinatorAgent,
    Decision,
    ExecutionReport,
    FinalStatus,
    NodeState,
    NodeStatus,
    ViolationKind,
    intervene,
    on_node_result,
)
from .data_planner import Aggregate, DataPlan, RetrievalRequest, execute_data_plan, plan_retrieval
from .harness import ReplDriver, replay, run_scenario
from .planner import Constraints, Infeasible, PlanDag, PlanNode, Step, TaskSpec, estimate, plan, publish_plan, replan, validate_dag
from .registry import AgentRecord, AgentRegistry, DataAssetRecord, DataOp, DataRegistry, Granularity
from .scenario import Scenario, ScenarioError, load_scenario
from .sim import Scheduler, SimClock
from .streams import END, PENDING, Event, Message, MessageKind, Session, SessionConfig, SessionHub, StreamLog
from .tags import match_tags, parse_tag_expr, to_text

__version__ = "0.1.0"

__all__ = [
    "Action", "AgentInstance", "AgentRecord", "AgentRegistry", "AgentRuntime", "Aggregate",
    "Constraints", "CoordinatorAgent", "DataAssetRecord", "DataOp", "DataPlan", "DataRegistry",
    "Decision", "END", "Event", "ExecutionReport", "FinalStatus", "Granularity", "Infeasible",
    "Message", "MessageKind", "NodeState", "NodeStatus", "OutputEntry", "PENDING", "PlanDag",
    "PlanNode", "ProcessorOutput", "ReplDriver", "RetrievalRequest", "Scenario", "ScenarioError",
    "Scheduler", "Session", "SessionConfig", "SessionHub", "SimClock", "Step", "StreamLog",
    "TaskSpec", "ViolationKind", "estimate", "execute_data_plan", "intervene", "load_scenario",
    "match_tags", "on_node_result", "parse_tag_expr", "plan", "plan_retrieval", "publish_plan",
    "replan", "replay", "run_scenario", "should_trigger", "to_text", "validate_dag",
]
