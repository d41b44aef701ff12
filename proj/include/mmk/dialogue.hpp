#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mmk {

enum class Speaker { Patient, Doctor };

std::string_view speaker_name(Speaker s);
// Throws SchemaError for anything other than "patient" / "doctor".
Speaker parse_speaker(std::string_view label);

struct Utterance {
  Speaker speaker = Speaker::Patient;
  std::string text;

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

// The three generation targets of one dialogue.
struct SummaryTriple {
  std::string mcs;      // medical concern summary
  std::string di;       // doctor impression
  std::string summary;  // overall summary

  friend bool operator==(const SummaryTriple&, const SummaryTriple&) = default;
};

struct Dialogue {
  std::string id;
  std::vector<Utterance> utterances;
  std::optional<std::vector<double>> visual;
  SummaryTriple targets;

  friend bool operator==(const Dialogue&, const Dialogue&) = default;
};

enum class Task { Sum = 0, Mcs = 1, Di = 2 };

inline constexpr std::array<Task, 3> kAllTasks{Task::Sum, Task::Mcs, Task::Di};

std::string_view task_name(Task t);
// "sum" | "mcs" | "di"; throws ConfigError otherwise.
Task parse_task(std::string_view name);
const std::string& target_text(const SummaryTriple& t, Task task);

// Ordered, duplicate-free subset of tasks.
class TaskSet {
 public:
  TaskSet() = default;
  TaskSet(std::initializer_list<Task> tasks);
  // Comma-separated list such as "sum,mcs".
  static TaskSet parse(std::string_view list);

  bool contains(Task t) const { return bits_[static_cast<int>(t)]; }
  void insert(Task t) { bits_[static_cast<int>(t)] = true; }
  std::vector<Task> tasks() const;
  std::size_t size() const;
  bool empty() const { return size() == 0; }
  std::string str() const;

  friend bool operator==(const TaskSet&, const TaskSet&) = default;

 private:
  std::array<bool, 3> bits_{};
};

}  // namespace mmk
