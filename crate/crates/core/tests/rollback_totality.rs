// SPDX-License-Identifier: Apache-2.0

mod support;

use qslice_core::scenarios::{usecase1, usecase2};

#[test]
fn usecase1_rolls_back_from_every_step() {
    let out = support::rollback_sweep(&usecase1());
    assert!(out.cases >= 10, "{out:?}");
    assert!(out.violations.is_empty(), "{:#?}", out.violations);
}

#[test]
fn usecase2_rolls_back_from_every_step() {
    let out = support::rollback_sweep(&usecase2());
    assert!(out.cases > support::rollback_sweep(&usecase1()).cases);
    assert!(out.violations.is_empty(), "{:#?}", out.violations);
}
