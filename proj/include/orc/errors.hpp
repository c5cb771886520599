#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace orc {

// Every failure raised by the library derives from Error so callers (the CLI
// in particular) can map families onto exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Property evaluation outside the declared pressure window.
class DomainError : public Error {
public:
    using Error::Error;
};

// The evaporator left the three-zone (subcooled / two-phase / superheated) regime.
class RegionCollapse : public Error {
public:
    using Error::Error;
};

class SolverError : public Error {
public:
    SolverError(const std::string& what, double residual)
        : Error(what), residual_(residual) {}
    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class NonFiniteError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

class DatasetError : public Error {
public:
    using Error::Error;
};

class EpisodeError : public Error {
public:
    using Error::Error;
};

}  // namespace orc
