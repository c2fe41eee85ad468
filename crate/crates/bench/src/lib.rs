//! Fixtures shared by the benchmarks.

use tofec_core::model::{ClassSpec, DelayParams, OpType, SystemSpec};

/// 3 MB reads with a 45 ms floor and a 160 ms exponential tail.
pub fn reference_class() -> ClassSpec {
    ClassSpec {
        op_type: OpType::Read,
        file_size: 3.0,
        popularity: 1.0,
        k_max: 6,
        r_max: 2.0,
        params: DelayParams::new(21.0, 8.0, 76.0, 28.0).expect("valid parameters"),
    }
}

pub fn reference_system(threads: usize) -> SystemSpec {
    SystemSpec {
        thread_count: threads,
        classes: vec![reference_class()],
    }
}
