"""acpflow: batched AC power flow for transmission and distribution networks.

Two solver families share one scenario/batch engine:

* transmission: polar Newton-Raphson with matrix-free Jacobian-vector
  products, solved by restarted GMRES under a block lower-triangular
  fast-decoupled left preconditioner, verified against a dense-LU oracle;
* distribution: three-phase unbalanced Z-Bus current-injection fixed point
  with a precomputed reduced impedance operator and wye/delta constant-power
  loads.
"""

from .network import (
    AdmittanceMatrix,
    BranchRecord,
    BusKind,
    BusPartition,
    BusRecord,
    CaseParseError,
    PartitionedYViews,
    TransmissionNetwork,
    build_ybus,
    extract_partitioned_views,
    network_from_json,
    network_to_json,
    parse_matpower_case,
    partition_buses,
)
from .sparse import (
    BlockFactor,
    GmresOptions,
    GmresStats,
    NonFiniteOperatorError,
    SingularFactorError,
    SparseCoo,
    SparseCsr,
    coo_to_csr,
    factorize_regularized,
    gmres,
    spmv,
)
from .transmission import (
    FdPreconditioner,
    NewtonOptions,
    NewtonResult,
    PolarState,
    TransmissionModel,
    TransmissionScenario,
    apply_preconditioner,
    base_scenario,
    build_preconditioner,
    build_transmission_model,
    calc_injections,
    dense_jacobian,
    dense_newton_oracle,
    flat_start,
    jacobian_vector_product,
    mismatch,
    newton_solve,
)
from .distribution import (
    DistributionScenario,
    FixedPointOptions,
    FixedPointResult,
    LoadSpec,
    SchemaError,
    ThreePhaseNetwork,
    VoltageFloorError,
    ZBusModel,
    batch_zbus_solve,
    build_three_phase_ybus,
    build_zbus_model,
    current_injection,
    fixed_point_residual,
    kirchhoff_residual,
    parse_distribution_json,
    reduce_zbus,
    zbus_iterate,
)
from .batch import (
    BatchReport,
    ScenarioSpec,
    apply_multipliers,
    distribution_base,
    generate_load_multipliers,
    make_scenarios,
    report_to_csv,
    report_to_dict,
    run_batch,
    transmission_base,
)

__version__ = "0.1.0"
