//! Numeric identifier newtypes shared across the trace format, simulator,
//! and analyzers.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident, $inner:ty) => {
        $(#[$meta])*
        #[derive(
            Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash,
            Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }

        impl From<$inner> for $name {
            fn from(raw: $inner) -> Self {
                Self(raw)
            }
        }
    };
}

id_type!(
    /// Process identifier. The simulator reserves low pids for per-cpu idle
    /// tasks and numbers scenario processes from 1000.
    Pid,
    u32
);
id_type!(
    /// File descriptor, unique within one process.
    Fd,
    u32
);
id_type!(
    /// Connection token, unique across a whole trace. Both endpoints of a
    /// socket connection reference the same token.
    ConnToken,
    u64
);
id_type!(
    /// Hardware interrupt line.
    IrqId,
    u16
);

/// System call identifier in the synthetic syscall table below.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SyscallId(pub u16);

/// Trap (exception) identifier.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TrapId(pub u16);

impl SyscallId {
    /// Fallback id used when the blocking site cannot be determined, e.g.
    /// a process that was already blocked when the trace began.
    pub const UNKNOWN: SyscallId = SyscallId(0);
    pub const READ: SyscallId = SyscallId(1);
    pub const WRITE: SyscallId = SyscallId(2);
    pub const OPEN: SyscallId = SyscallId(3);
    pub const CLOSE: SyscallId = SyscallId(4);
    pub const POLL: SyscallId = SyscallId(5);
    pub const MMAP: SyscallId = SyscallId(6);
    pub const MUNMAP: SyscallId = SyscallId(7);
    pub const STAT: SyscallId = SyscallId(8);
    pub const FORK: SyscallId = SyscallId(9);
    pub const WAITPID: SyscallId = SyscallId(10);
    pub const EXIT: SyscallId = SyscallId(11);
    pub const LISTEN: SyscallId = SyscallId(12);
    pub const CONNECT: SyscallId = SyscallId(13);
    pub const ACCEPT: SyscallId = SyscallId(14);
    pub const NANOSLEEP: SyscallId = SyscallId(15);
    pub const EXECVE: SyscallId = SyscallId(16);
    /// Pseudo syscall id for page faults on anonymous memory so that they
    /// can live in the same wait-generic map as real syscalls.
    pub const PAGE_FAULT: SyscallId = SyscallId(0xfffe);

    pub fn name(self) -> &'static str {
        match self {
            SyscallId::UNKNOWN => "unknown",
            SyscallId::READ => "read",
            SyscallId::WRITE => "write",
            SyscallId::OPEN => "open",
            SyscallId::CLOSE => "close",
            SyscallId::POLL => "poll",
            SyscallId::MMAP => "mmap",
            SyscallId::MUNMAP => "munmap",
            SyscallId::STAT => "stat",
            SyscallId::FORK => "fork",
            SyscallId::WAITPID => "waitpid",
            SyscallId::EXIT => "exit",
            SyscallId::LISTEN => "listen",
            SyscallId::CONNECT => "connect",
            SyscallId::ACCEPT => "accept",
            SyscallId::NANOSLEEP => "nanosleep",
            SyscallId::EXECVE => "execve",
            SyscallId::PAGE_FAULT => "page_fault",
            _ => "sys_?",
        }
    }
}

impl fmt::Display for SyscallId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = self.name();
        if name == "sys_?" {
            write!(f, "sys_{}", self.0)
        } else {
            f.write_str(name)
        }
    }
}

impl TrapId {
    /// Page fault, numbered after the x86 exception vector.
    pub const PAGE_FAULT: TrapId = TrapId(14);

    pub fn name(self) -> &'static str {
        match self {
            TrapId::PAGE_FAULT => "page_fault",
            _ => "trap_?",
        }
    }
}

impl fmt::Display for TrapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == TrapId::PAGE_FAULT {
            f.write_str("page_fault")
        } else {
            write!(f, "trap_{}", self.0)
        }
    }
}

impl IrqId {
    pub const TIMER: IrqId = IrqId(0);
    pub const IO: IrqId = IrqId(1);

    pub fn name(self) -> &'static str {
        match self {
            IrqId::TIMER => "timer",
            IrqId::IO => "io",
            _ => "irq_?",
        }
    }
}
