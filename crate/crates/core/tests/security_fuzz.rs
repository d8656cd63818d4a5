// SPDX-License-Identifier: Apache-2.0

mod support;

#[test]
fn fuzzed_slices_pass_audit_and_tear_down_cleanly() {
    let out = support::security_fuzz(0x5eed_0002, 50, 40);
    assert!(out.requests >= 1500, "{out:?}");
    assert!(out.activated > 0 && out.rejected > 0, "{out:?}");
    assert!(out.violations.is_empty(), "{} violations, first: {:?}", out.violations.len(), out.violations.first());
}
