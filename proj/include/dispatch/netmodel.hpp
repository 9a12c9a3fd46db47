#pragma once

#include <complex>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/SparseCore>

#include "dispatch/errors.hpp"

namespace dispatch {

constexpr double kInf = std::numeric_limits<double>::infinity();

enum class BusKind { PQ, PV, Swing };

// All electrical quantities are stored per-unit on base_mva. Case files
// carry MW/MVAr/MWh; conversion happens in load_case.
struct Bus {
  std::string id;
  int island = 0;
  BusKind kind = BusKind::PQ;
  std::vector<double> p_load, q_load;  // length T, p.u.
  double g_sh = 0.0, b_sh = 0.0;       // p.u.
  double v_set = 1.0;                  // PV/swing setpoint, p.u.
  double q_min = -kInf, q_max = kInf;  // PV capability, p.u.
};

struct Branch {
  std::string id;
  std::string from_id, to_id;
  int from = -1, to = -1;  // bus indices, set by load_case
  double r = 0.0, x = 0.0;
  double b_ch = 0.0;
  double tap = 1.0;
  double shift = 0.0;               // radians
  std::vector<uint8_t> status;      // length T, 1 = in service
  bool in_service(int hour) const { return status[static_cast<size_t>(hour)] != 0; }
};

struct Bid {
  std::string id;
  std::string bus_id;
  int bus = -1;
  std::vector<double> price;   // currency/MWh, length T
  std::vector<double> lb, ub;  // p.u., length T
  double ramp_up = kInf, ramp_down = kInf;  // p.u. per hour
  double p_initial = 0.0;                   // p.u., output before hour 1
};

struct EnergyGroup {
  std::string id;
  std::vector<std::string> member_ids;
  std::vector<int> members;  // bid indices
  double e_min = 0.0, e_max = kInf;  // p.u.-hours over the session
};

struct FlowTerm {
  std::string branch_id;
  int branch = -1;
  double sign = 1.0;  // +1 or -1
};

struct FlowConstraint {
  std::string id;
  std::vector<FlowTerm> terms;
  std::vector<double> limit;  // length T, p.u.
};

struct CaseModel {
  std::string name;
  int T = 1;
  double base_mva = 100.0;
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  std::vector<Bid> bids;
  std::vector<EnergyGroup> energy_groups;
  std::vector<FlowConstraint> flow_constraints;

  // Derived by load_case / relink().
  std::vector<int> island_ids;   // sorted distinct island ids
  std::vector<int> swing_bus;    // per island index: bus index of its swing

  int n_buses() const { return static_cast<int>(buses.size()); }
  int n_bids() const { return static_cast<int>(bids.size()); }
  int n_islands() const { return static_cast<int>(island_ids.size()); }
  int bus_index(const std::string& id) const;       // -1 if absent
  int island_index(int island_id) const;            // -1 if absent
  int island_of_bus(int bus) const { return island_index(buses[static_cast<size_t>(bus)].island); }

  // Resolves string references to indices and recomputes island structure.
  // Throws ValidationError on dangling references.
  void relink();
};

struct Violation {
  std::string entity;  // offending entity id ("bus b2", "bid g1", ...)
  int hour = -1;       // -1 when not hour-specific
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
  std::string to_string() const;
};

// Per-hour nodal admittance plus per-branch two-port coefficients.
struct AdmittanceStructure {
  int hour = 0;
  Eigen::SparseMatrix<std::complex<double>> ybus;  // n_bus x n_bus
  struct TwoPort {
    std::complex<double> yff, yft, ytf, ytt;
    bool in_service = false;
  };
  std::vector<TwoPort> ports;  // per branch
};

// Bids grouped by bus: one column of B per group suffices for reductions.
struct IncidenceMap {
  std::vector<int> bid_bus;                // per bid: bus index
  std::vector<std::vector<int>> groups;    // per group: member bid indices
  std::vector<int> group_bus;              // per group: shared bus index
  std::vector<int> group_of_bid;           // per bid: group index
  int n_groups() const { return static_cast<int>(groups.size()); }
};

CaseModel load_case(std::istream& in);
CaseModel load_case_file(const std::string& path);
// Parse and link only; callers run validate_case themselves.
CaseModel parse_case(std::istream& in);
std::string serialize_case(const CaseModel& cs);

ValidationReport validate_case(const CaseModel& cs);

// Throws IslandingError if some island has no in-service path to its swing
// bus at this hour.
AdmittanceStructure build_admittance(const CaseModel& cs, int hour);

IncidenceMap bid_incidence(const CaseModel& cs);

bool structurally_equal(const CaseModel& a, const CaseModel& b);

}  // namespace dispatch
