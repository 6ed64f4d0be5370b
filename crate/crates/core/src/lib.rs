pub mod imgstore;
pub mod jobrt;
pub mod proto;
pub mod scenario;
pub mod sched;
pub mod sup;
pub mod tel;
pub mod timefmt;
