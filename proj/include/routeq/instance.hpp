#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace routeq {

// Node indexing convention, used everywhere: customers 0..n-1, then
// depots n..n+m-1.
struct Instance {
  Eigen::MatrixX2d customers;  // row per customer, columns x,y in [0,1]
  Eigen::VectorXi demands;     // one positive integer per customer
  Eigen::MatrixX2d depots;     // row per depot
  int capacity = 0;
  std::string id;

  int n() const { return static_cast<int>(customers.rows()); }
  int m() const { return static_cast<int>(depots.rows()); }
  int n_nodes() const { return n() + m(); }
  bool is_depot(int node) const { return node >= n(); }
  bool is_mdvrp() const { return m() > 1; }

  Eigen::Vector2d node_xy(int node) const {
    return node < n() ? Eigen::Vector2d(customers.row(node))
                      : Eigen::Vector2d(depots.row(node - n()));
  }

  double distance(int a, int b) const {
    return (node_xy(a) - node_xy(b)).norm();
  }
};

// Euclidean distances over all nodes (customers first, then depots).
Eigen::MatrixXd distance_matrix(const Instance& instance);

// Coordinates i.i.d. uniform on the unit square, demands i.i.d. uniform in
// {1,...,9}; a pure function of its arguments. Throws if capacity < 9.
Instance generate_instance(int n, int m, int capacity, std::uint64_t seed);

// Capacity by problem size: 30 up to 20 customers, 40 up to 50, 50 beyond.
int default_capacity(int n);

// JSON-lines dataset I/O; one instance object per line.
void save_dataset(const std::string& path, const std::vector<Instance>& instances);
std::vector<Instance> load_dataset(const std::string& path);

bool operator==(const Instance& a, const Instance& b);

}  // namespace routeq
