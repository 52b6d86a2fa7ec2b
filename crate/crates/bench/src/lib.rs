//! Fixtures shared by the benchmarks.

use gca_core::dataio::{DomainRole, SplitSpec};
use gca_core::synthgen::{make_domain_family, DomainFamily, DomainGenConfig};
use gca_core::trainer::{prepare_domain, TransferData};

/// The reference three-domain family at `length` rows per domain.
pub fn family(length: usize) -> DomainFamily {
    let configs = DomainGenConfig::reference_domains(length, 100);
    make_domain_family(5, 3, 0.2, &configs, 0.05, 42).expect("reference family")
}

/// Domain 1 → domain 2 windows with `t_in = 2k`.
pub fn transfer(length: usize) -> TransferData {
    let fam = family(length);
    let split = SplitSpec::default();
    TransferData {
        source: prepare_domain(&fam.series[0], 6, 1, 1, &split, DomainRole::Source, 0)
            .expect("source"),
        target: prepare_domain(&fam.series[1], 6, 1, 1, &split, DomainRole::Target, 0)
            .expect("target"),
    }
}
