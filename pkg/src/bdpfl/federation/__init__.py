"""FedSGD simulation: data, learners and the per-mode privacy orchestration."""

from bdpfl.federation.data import (
    ClientShard,
    DataSet,
    IdxFormatError,
    load_idx,
    partition_iid,
    partition_shards,
    split_train_test,
    synth_data,
    write_idx,
)
from bdpfl.federation.models import Model, ModelState, model_gradient
from bdpfl.federation.simulation import (
    ClientUpdate,
    PrivacySettings,
    RoundBroadcast,
    RoundRecord,
    Simulation,
    aggregate,
    build_federation,
    leave_one_out_norms,
    local_update,
    records_to_csv,
    run_experiment,
    run_header,
)
