class EdgePlanError(Exception):
    pass


# Bad documents, bad arguments, bad calls (CLI exit status 1)
class InputError(EdgePlanError):
    pass


# Nothing valid exists for the given inputs (CLI exit status 2)
class InfeasibleError(EdgePlanError):
    pass


class UsageError(InputError):
    pass


class SchemaError(InputError):
    pass


class CycleDetected(InputError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__(f'Cycle detected in model graph: {self.cycle}')


class DanglingEdge(InputError):
    def __init__(self, edge):
        self.edge = tuple(edge)
        super().__init__(f'Edge {self.edge} references an unknown node')


class DuplicateId(InputError):
    def __init__(self, node_id):
        self.node_id = node_id
        super().__init__(f'Duplicate node id {node_id}')


class MultipleSources(InputError):
    def __init__(self, sources):
        self.sources = list(sources)
        super().__init__(f'Graph has {len(self.sources)} sources {self.sources}, add a virtual source first')


class MultipleSinks(InputError):
    def __init__(self, sinks):
        self.sinks = list(sinks)
        super().__init__(f'Graph has {len(self.sinks)} sinks {self.sinks}, add a virtual sink first')


class NoRoute(InputError):
    def __init__(self, src, dst):
        self.src, self.dst = src, dst
        super().__init__(f'No peak bandwidth declared from {src} to {dst}')


class NonChainPlan(InputError):
    pass


class MissingMetrics(InputError):
    pass


class NoFeasiblePlan(InfeasibleError):
    pass


class UnhostableNode(InfeasibleError):
    def __init__(self, node_id, device_id):
        self.node_id, self.device_id = node_id, device_id
        super().__init__(f'Node {node_id} cannot be hosted on device {device_id}')


class PipelineTooDeep(InfeasibleError):
    def __init__(self, microbatches, steps):
        self.microbatches, self.steps = microbatches, steps
        super().__init__(f'{microbatches} microbatches cannot fill a pipeline of {steps} steps')


class UnschedulableTask(InfeasibleError):
    def __init__(self, task_id, domain_id):
        self.task_id, self.domain_id = task_id, domain_id
        super().__init__(f'Transfer {task_id} is routed through zero-capacity domain {domain_id}')


class DeadlinePassed(InfeasibleError):
    pass


class DeadDevice(InfeasibleError):
    def __init__(self, device_id, time):
        self.device_id, self.time = device_id, time
        super().__init__(f'Device {device_id} left at t={time:.3f}s while tasks were still assigned to it')
